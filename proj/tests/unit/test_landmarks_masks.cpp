#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "autt/error.hpp"
#include "autt/landmarks.hpp"

using namespace autt;

namespace {

// Every point at (0.5, 0.5) except the eyes, which sit 0.2 apart.
std::array<Point, kLandmarkCount> eye_layout() {
  std::array<Point, kLandmarkCount> pts;
  pts.fill({0.5, 0.5});
  for (std::size_t i = 36; i < 42; ++i) pts[i] = {0.4, 0.3};
  for (std::size_t i = 42; i < 48; ++i) pts[i] = {0.6, 0.3};
  return pts;
}

AUCenterTable one_center(std::vector<std::size_t> lm, std::vector<double> w, double dy) {
  return AUCenterTable({AUEntry{1, {AUCenterDef{std::move(lm), std::move(w), dy}}}});
}

// Grid point (h, w) in normalized coordinates.
Point cell_center(std::size_t h, std::size_t w, GridShape g) {
  return {(static_cast<double>(w) + 0.5) / static_cast<double>(g.width),
          (static_cast<double>(h) + 0.5) / static_cast<double>(g.height)};
}

}  // namespace

TEST(Landmarks, RangeChecked) {
  auto pts = eye_layout();
  EXPECT_NO_THROW(LandmarkSet{pts});
  pts[10] = {1.2, 0.5};
  EXPECT_THROW(LandmarkSet{pts}, ConfigError);
  pts[10] = {std::nan(""), 0.5};
  EXPECT_THROW(LandmarkSet{pts}, ConfigError);
}

TEST(Landmarks, InterOcular) {
  EXPECT_NEAR(LandmarkSet(eye_layout()).inter_ocular(), 0.2, 1e-15);
}

TEST(Landmarks, TextRoundTrip) {
  LandmarkSet face = canonical_face();
  LandmarkSet back = parse_landmarks(format_landmarks(face));
  for (std::size_t i = 0; i < kLandmarkCount; ++i) {
    EXPECT_EQ(back[i].x, face[i].x);
    EXPECT_EQ(back[i].y, face[i].y);
  }
}

TEST(Landmarks, ParseRejectsWrongCountsAndJunk) {
  std::string text = "# comment\n\n";
  for (int i = 0; i < 67; ++i) text += "0.5 0.5\n";
  EXPECT_THROW(parse_landmarks(text), FormatError);
  EXPECT_NO_THROW(parse_landmarks(text + "0.1 0.9\n"));
  EXPECT_THROW(parse_landmarks(text + "0.1 0.9\n0.2 0.2\n"), FormatError);
  EXPECT_THROW(parse_landmarks(text + "0.1 abc\n"), FormatError);
  EXPECT_THROW(parse_landmarks(text + "0.1 1.5\n"), Error);
}

TEST(AUCenters, MidpointOfTwoLandmarks) {
  auto pts = eye_layout();
  pts[0] = {0.4, 0.4};
  pts[1] = {0.6, 0.4};
  auto c = au_centers(LandmarkSet(pts), one_center({0, 1}, {0.5, 0.5}, 0.0));
  ASSERT_EQ(c.size(), 1u);
  ASSERT_EQ(c[0].size(), 1u);
  EXPECT_NEAR(c[0][0].x, 0.5, 1e-15);
  EXPECT_NEAR(c[0][0].y, 0.4, 1e-15);
}

TEST(AUCenters, SingleLandmark) {
  auto pts = eye_layout();
  pts[30] = {0.25, 0.75};
  auto c = au_centers(LandmarkSet(pts), one_center({30}, {1.0}, 0.0));
  EXPECT_EQ(c[0][0].x, 0.25);
  EXPECT_EQ(c[0][0].y, 0.75);
}

TEST(AUCenters, VerticalOffsetInInterOcularUnits) {
  auto pts = eye_layout();
  pts[30] = {0.5, 0.6};
  auto c = au_centers(LandmarkSet(pts), one_center({30}, {1.0}, 0.5));
  EXPECT_NEAR(c[0][0].y, 0.7, 1e-15);
}

TEST(AUCenters, ClampedToUnitSquare) {
  auto pts = eye_layout();
  pts[8] = {0.5, 0.95};
  auto c = au_centers(LandmarkSet(pts), one_center({8}, {1.0}, 1.0));
  EXPECT_EQ(c[0][0].y, 1.0);
}

TEST(Mask, PeakOnGridPoint) {
  GridShape g{7, 7};
  Tensor m = generate_mask({{cell_center(3, 2, g)}}, g, 1.5);
  EXPECT_EQ(m[3 * 7 + 2], 1.0);
}

TEST(Mask, OneSigmaAway) {
  GridShape g{9, 9};
  Tensor m = generate_mask({{cell_center(4, 4, g)}}, g, 1.0);
  EXPECT_NEAR(m[4 * 9 + 5], std::exp(-0.5), 1e-15);
  EXPECT_NEAR(m[5 * 9 + 4], 0.60653, 5e-6);
}

TEST(Mask, NoCentersGiveZeroMap) {
  GridShape g{4, 5};
  Tensor m = generate_mask({{}, {cell_center(1, 1, g)}}, g, 1.0);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(m[i], 0.0);
  EXPECT_EQ(*std::max_element(m.data().begin() + 20, m.data().end()), 1.0);
}

TEST(Mask, ValuesInRangeAndPeakExactlyOne) {
  GridShape g{14, 14};
  LandmarkSet face = canonical_face();
  for (const AUCenterTable& table : {AUCenterTable::bp4d(), AUCenterTable::disfa()}) {
    Tensor m = au_heatmap(face, table, g, 1.5);
    const std::size_t cells = g.cells();
    for (std::size_t i = 0; i < table.size(); ++i) {
      double peak = 0.0;
      for (std::size_t c = 0; c < cells; ++c) {
        const double v = m[i * cells + c];
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
        peak = std::max(peak, v);
      }
      EXPECT_EQ(peak, 1.0);
    }
  }
}

TEST(Mask, MaxCombinationOfCenters) {
  GridShape g{6, 6};
  Point a = cell_center(1, 1, g), b = cell_center(4, 4, g);
  Tensor both = generate_mask({{a, b}}, g, 1.0);
  Tensor ma = generate_mask({{a}}, g, 1.0), mb = generate_mask({{b}}, g, 1.0);
  for (std::size_t i = 0; i < both.numel(); ++i) EXPECT_EQ(both[i], std::max(ma[i], mb[i]));
}

TEST(Mask, TranslationEquivariant) {
  GridShape g{8, 8};
  // Off-grid centers on a dyadic lattice so the shift is exact.
  std::vector<std::vector<Point>> centers{{{3.75 / 8, 2.25 / 8}}, {{5.5 / 8, 4.5 / 8}}};
  std::vector<std::vector<Point>> shifted = centers;
  for (auto& au : shifted)
    for (auto& p : au) p.x += 1.0 / 8;
  Tensor a = generate_mask(centers, g, 1.0), b = generate_mask(shifted, g, 1.0);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t h = 0; h < 8; ++h)
      for (std::size_t w = 1; w + 1 < 8; ++w)
        EXPECT_EQ(b[(i * 8 + h) * 8 + w + 1], a[(i * 8 + h) * 8 + w]) << i << " " << h << " " << w;
}

TEST(Mask, InvalidSigmaRejected) {
  EXPECT_THROW(generate_mask({{{0.5, 0.5}}}, {3, 3}, 0.0), ConfigError);
}

TEST(Heatmap, ByteIdenticalToMask) {
  LandmarkSet face = canonical_face();
  AUCenterTable t = AUCenterTable::bp4d();
  Tensor mask = generate_mask(au_centers(face, t), {14, 14}, 1.5);
  EXPECT_EQ(au_heatmap(face, t, {14, 14}, 1.5), mask);
}

TEST(Table, BuiltinsCoverDatasets) {
  EXPECT_EQ(AUCenterTable::bp4d().au_ids(),
            (std::vector<int>{1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24}));
  EXPECT_EQ(AUCenterTable::disfa().au_ids(), (std::vector<int>{1, 2, 4, 6, 9, 12, 25, 26}));
  EXPECT_EQ(AUCenterTable::named_or_file("disfa").size(), 8u);
}

TEST(Table, TextRoundTrip) {
  AUCenterTable t = AUCenterTable::bp4d();
  AUCenterTable back = AUCenterTable::parse(t.to_text());
  EXPECT_EQ(back.to_text(), t.to_text());
  LandmarkSet face = canonical_face();
  EXPECT_EQ(au_heatmap(face, back, {14, 14}, 1.5), au_heatmap(face, t, {14, 14}, 1.5));
}

TEST(Table, ParseAndValidate) {
  AUCenterTable t =
      AUCenterTable::parse("version=1\n# brows\nau=1 landmarks=21,22 weights=0.5,0.5 dy=-0.25\n"
                           "au=1 landmarks=19 weights=1 dy=0\nau=12 landmarks=48 weights=1 dy=0\n");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.entries()[0].centers.size(), 2u);
  EXPECT_EQ(t.entries()[0].centers[0].dy, -0.25);
  EXPECT_EQ(t.subset({12}).au_ids(), (std::vector<int>{12}));
  EXPECT_THROW(t.subset({99}), ConfigError);

  EXPECT_THROW(AUCenterTable::parse("au=1 landmarks=1 weights=1 dy=0\n"), FormatError);
  EXPECT_THROW(AUCenterTable::parse("version=2\nau=1 landmarks=1 weights=1 dy=0\n"), FormatError);
  EXPECT_ANY_THROW(AUCenterTable::parse("version=1\nau=1 landmarks=68 weights=1 dy=0\n"));
  EXPECT_ANY_THROW(AUCenterTable::parse("version=1\nau=1 landmarks=1,2 weights=1 dy=0\n"));
  EXPECT_ANY_THROW(AUCenterTable::parse("version=1\nau=1 landmarks=1 weights=1 color=red\n"));
}

TEST(Table, LoadFromFile) {
  const auto path = std::filesystem::temp_directory_path() / "autt-table-test.txt";
  {
    std::ofstream out(path);
    out << AUCenterTable::disfa().to_text();
  }
  EXPECT_EQ(AUCenterTable::named_or_file(path.string()).au_ids(), AUCenterTable::disfa().au_ids());
  std::filesystem::remove(path);
  EXPECT_THROW(AUCenterTable::load(path), FormatError);
}

TEST(GridCell, MapsAndClamps) {
  GridShape g{4, 6};
  EXPECT_EQ(grid_cell({0.0, 0.0}, g), (std::pair<std::size_t, std::size_t>{0, 0}));
  EXPECT_EQ(grid_cell({1.0, 1.0}, g), (std::pair<std::size_t, std::size_t>{3, 5}));
  EXPECT_EQ(grid_cell({0.5, 0.3}, g), (std::pair<std::size_t, std::size_t>{1, 3}));
}
