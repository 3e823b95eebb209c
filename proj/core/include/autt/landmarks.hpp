#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "autt/scanning.hpp"
#include "autt/tensor.hpp"

namespace autt {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

inline constexpr std::size_t kLandmarkCount = 68;

/// 68 facial landmarks in normalized image coordinates (x right, y down).
class LandmarkSet {
 public:
  LandmarkSet() = default;
  /// Throws ConfigError unless every coordinate is finite and in [0, 1].
  explicit LandmarkSet(const std::array<Point, kLandmarkCount>& points);

  const Point& operator[](std::size_t i) const { return points_.at(i); }
  const std::array<Point, kLandmarkCount>& points() const noexcept { return points_; }
  /// Distance between the two eye centers.
  double inter_ocular() const;

 private:
  std::array<Point, kLandmarkCount> points_{};
};

/// A frontal face template in the usual 68-point layout.
LandmarkSet canonical_face();

/// One `x y` pair per line, exactly 68 lines (blank lines and '#' comments ignored).
LandmarkSet parse_landmarks(std::string_view text);
LandmarkSet load_landmarks(const std::filesystem::path& path);
std::string format_landmarks(const LandmarkSet& landmarks);

/// Center = sum_j weights[j] * landmark[landmarks[j]] + (0, dy * inter-ocular).
struct AUCenterDef {
  std::vector<std::size_t> landmarks;
  std::vector<double> weights;
  double dy = 0.0;
};

struct AUEntry {
  int au = 0;
  std::vector<AUCenterDef> centers;
};

/// Per-AU center definitions. Text form, one line per center:
///   au=<id> landmarks=<i[,j]> weights=<a[,b]> dy=<offset>
/// preceded by a `version=1` line.
class AUCenterTable {
 public:
  AUCenterTable() = default;
  explicit AUCenterTable(std::vector<AUEntry> entries);

  static AUCenterTable parse(std::string_view text);
  static AUCenterTable load(const std::filesystem::path& path);
  /// Built-in reconstructions for the 12 BP4D and 8 DISFA AUs.
  static AUCenterTable bp4d();
  static AUCenterTable disfa();
  /// Look up a built-in table by name ("bp4d", "disfa") or load a file.
  static AUCenterTable named_or_file(const std::string& spec);

  std::string to_text() const;
  const std::vector<AUEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::vector<int> au_ids() const;
  /// Entries for the given AU ids, in that order.
  AUCenterTable subset(const std::vector<int>& ids) const;

 private:
  std::vector<AUEntry> entries_;
};

/// Centers for every AU in table order, clamped to [0, 1].
std::vector<std::vector<Point>> au_centers(const LandmarkSet& landmarks,
                                           const AUCenterTable& table);

/// Gaussian RoI maps [N_AU, H', W']: per AU the max over its centers of
/// exp(-d^2 / (2 sigma^2)), with d measured in grid cells from the center
/// mapped to grid coordinates (cell (h, w) sits at ((w+0.5)/W', (h+0.5)/H')).
/// Each non-zero map is divided by its peak, so its maximum is exactly 1.
Tensor generate_mask(const std::vector<std::vector<Point>>& centers, GridShape grid,
                     double sigma);

/// Ground-truth heatmap for the localization loss; identical to the mask.
Tensor au_heatmap(const LandmarkSet& landmarks, const AUCenterTable& table, GridShape grid,
                  double sigma);

/// Grid cell containing a normalized point.
std::pair<std::size_t, std::size_t> grid_cell(const Point& p, GridShape grid);

}  // namespace autt
