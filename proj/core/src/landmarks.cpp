#include "autt/landmarks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "autt/error.hpp"

namespace autt {
namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

double parse_double(std::string_view s, const std::string& context) {
  try {
    std::size_t used = 0;
    const std::string str(s);
    const double v = std::stod(str, &used);
    if (used != str.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw FormatError(context + ": cannot parse number '" + std::string(s) + "'");
  }
}

long parse_long(std::string_view s, const std::string& context) {
  long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw FormatError(context + ": cannot parse integer '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Reconstructed RoI centers. Negative dy moves a center up the face.
constexpr std::string_view kBp4dTable = R"(version=1
au=1 landmarks=21 weights=1 dy=-0.3
au=1 landmarks=22 weights=1 dy=-0.3
au=2 landmarks=18 weights=1 dy=-0.3
au=2 landmarks=25 weights=1 dy=-0.3
au=4 landmarks=21,22 weights=0.5,0.5 dy=0
au=6 landmarks=41 weights=1 dy=0.5
au=6 landmarks=46 weights=1 dy=0.5
au=7 landmarks=40 weights=1 dy=0
au=7 landmarks=47 weights=1 dy=0
au=10 landmarks=50 weights=1 dy=0
au=10 landmarks=52 weights=1 dy=0
au=12 landmarks=48 weights=1 dy=0
au=12 landmarks=54 weights=1 dy=0
au=14 landmarks=48,4 weights=0.8,0.2 dy=0
au=14 landmarks=54,12 weights=0.8,0.2 dy=0
au=15 landmarks=48 weights=1 dy=0.5
au=15 landmarks=54 weights=1 dy=0.5
au=17 landmarks=57,8 weights=0.5,0.5 dy=0
au=23 landmarks=62,66 weights=0.5,0.5 dy=0
au=24 landmarks=56 weights=1 dy=0
au=24 landmarks=58 weights=1 dy=0
)";

constexpr std::string_view kDisfaTable = R"(version=1
au=1 landmarks=21 weights=1 dy=-0.3
au=1 landmarks=22 weights=1 dy=-0.3
au=2 landmarks=18 weights=1 dy=-0.3
au=2 landmarks=25 weights=1 dy=-0.3
au=4 landmarks=21,22 weights=0.5,0.5 dy=0
au=6 landmarks=41 weights=1 dy=0.5
au=6 landmarks=46 weights=1 dy=0.5
au=9 landmarks=31 weights=1 dy=-0.3
au=9 landmarks=35 weights=1 dy=-0.3
au=12 landmarks=48 weights=1 dy=0
au=12 landmarks=54 weights=1 dy=0
au=25 landmarks=62,66 weights=0.5,0.5 dy=0
au=26 landmarks=57,8 weights=0.3,0.7 dy=0
)";

}  // namespace

LandmarkSet::LandmarkSet(const std::array<Point, kLandmarkCount>& points) : points_(points) {
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || p.x < 0.0 || p.x > 1.0 || p.y < 0.0 ||
        p.y > 1.0)
      throw ConfigError("landmark " + std::to_string(i) + " is outside [0, 1]");
  }
}

double LandmarkSet::inter_ocular() const {
  Point right{}, left{};
  for (std::size_t i = 36; i < 42; ++i) {
    right.x += points_[i].x / 6.0;
    right.y += points_[i].y / 6.0;
  }
  for (std::size_t i = 42; i < 48; ++i) {
    left.x += points_[i].x / 6.0;
    left.y += points_[i].y / 6.0;
  }
  return std::hypot(left.x - right.x, left.y - right.y);
}

LandmarkSet canonical_face() {
  std::array<Point, kLandmarkCount> p{};
  // Jaw line 0..16.
  for (std::size_t i = 0; i <= 16; ++i) {
    const double theta = std::numbers::pi * static_cast<double>(i) / 16.0;
    p[i] = {0.5 - 0.38 * std::cos(theta), 0.35 + 0.55 * std::sin(theta)};
  }
  const double brow_y[5] = {0.30, 0.27, 0.26, 0.27, 0.29};
  for (std::size_t i = 0; i < 5; ++i) {
    p[17 + i] = {0.20 + 0.06 * static_cast<double>(i), brow_y[i]};
    p[26 - i] = {0.80 - 0.06 * static_cast<double>(i), brow_y[i]};
  }
  for (std::size_t i = 0; i < 4; ++i) p[27 + i] = {0.5, 0.38 + 0.067 * static_cast<double>(i)};
  const Point nose[5] = {{0.43, 0.62}, {0.46, 0.63}, {0.5, 0.64}, {0.54, 0.63}, {0.57, 0.62}};
  for (std::size_t i = 0; i < 5; ++i) p[31 + i] = nose[i];
  const Point right_eye[6] = {{0.26, 0.40}, {0.30, 0.38}, {0.36, 0.38},
                              {0.40, 0.40}, {0.36, 0.42}, {0.30, 0.42}};
  const Point left_eye[6] = {{0.60, 0.40}, {0.64, 0.38}, {0.70, 0.38},
                             {0.74, 0.40}, {0.70, 0.42}, {0.64, 0.42}};
  for (std::size_t i = 0; i < 6; ++i) {
    p[36 + i] = right_eye[i];
    p[42 + i] = left_eye[i];
  }
  const Point mouth[20] = {{0.36, 0.75},  {0.41, 0.72}, {0.46, 0.71}, {0.50, 0.715}, {0.54, 0.71},
                           {0.59, 0.72},  {0.64, 0.75}, {0.59, 0.79}, {0.54, 0.81},  {0.50, 0.815},
                           {0.46, 0.81},  {0.41, 0.79}, {0.38, 0.75}, {0.45, 0.74},  {0.50, 0.74},
                           {0.55, 0.74},  {0.62, 0.75}, {0.55, 0.77}, {0.50, 0.775}, {0.45, 0.77}};
  for (std::size_t i = 0; i < 20; ++i) p[48 + i] = mouth[i];
  return LandmarkSet(p);
}

LandmarkSet parse_landmarks(std::string_view text) {
  std::array<Point, kLandmarkCount> pts{};
  std::size_t n = 0;
  std::size_t line_no = 0;
  for (auto line : split(text, '\n')) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    std::istringstream in{std::string(line)};
    double x = 0, y = 0;
    std::string extra;
    if (!(in >> x >> y) || (in >> extra))
      throw FormatError("landmarks line " + std::to_string(line_no) + ": expected 'x y'");
    if (n >= kLandmarkCount) throw FormatError("landmarks: more than 68 points");
    pts[n++] = {x, y};
  }
  if (n != kLandmarkCount)
    throw FormatError("landmarks: expected 68 points, found " + std::to_string(n));
  return LandmarkSet(pts);
}

LandmarkSet load_landmarks(const std::filesystem::path& path) {
  return parse_landmarks(read_file(path));
}

std::string format_landmarks(const LandmarkSet& landmarks) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& p : landmarks.points()) out << p.x << ' ' << p.y << '\n';
  return out.str();
}

AUCenterTable::AUCenterTable(std::vector<AUEntry> entries) : entries_(std::move(entries)) {
  for (const auto& e : entries_) {
    if (e.centers.empty())
      throw ConfigError("AU " + std::to_string(e.au) + " has no center definitions");
    for (const auto& c : e.centers) {
      if (c.landmarks.empty() || c.landmarks.size() != c.weights.size())
        throw ConfigError("AU " + std::to_string(e.au) + ": landmarks and weights must pair up");
      double total = 0.0;
      for (std::size_t i = 0; i < c.landmarks.size(); ++i) {
        if (c.landmarks[i] >= kLandmarkCount)
          throw ConfigError("AU " + std::to_string(e.au) + ": landmark index " +
                            std::to_string(c.landmarks[i]) + " out of range");
        total += c.weights[i];
      }
      if (std::abs(total - 1.0) > 1e-9)
        throw ConfigError("AU " + std::to_string(e.au) + ": weights must sum to 1");
      if (!std::isfinite(c.dy)) throw ConfigError("AU " + std::to_string(e.au) + ": bad dy");
    }
  }
}

AUCenterTable AUCenterTable::parse(std::string_view text) {
  std::vector<AUEntry> entries;
  bool have_version = false;
  std::size_t line_no = 0;
  for (auto line : split(text, '\n')) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const std::string ctx = "AU table line " + std::to_string(line_no);
    if (line.starts_with("version=")) {
      if (parse_long(line.substr(8), ctx) != 1) throw FormatError(ctx + ": unsupported version");
      have_version = true;
      continue;
    }
    if (!have_version) throw FormatError(ctx + ": missing version=1 header");
    long au = -1;
    AUCenterDef def;
    bool has_landmarks = false, has_weights = false;
    std::istringstream in{std::string(line)};
    std::string field;
    while (in >> field) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw FormatError(ctx + ": expected key=value, got " + field);
      const std::string_view key = std::string_view(field).substr(0, eq);
      const std::string_view value = std::string_view(field).substr(eq + 1);
      if (key == "au") {
        au = parse_long(value, ctx);
      } else if (key == "landmarks") {
        for (auto part : split(value, ','))
          def.landmarks.push_back(static_cast<std::size_t>(parse_long(part, ctx)));
        has_landmarks = true;
      } else if (key == "weights") {
        for (auto part : split(value, ',')) def.weights.push_back(parse_double(part, ctx));
        has_weights = true;
      } else if (key == "dy") {
        def.dy = parse_double(value, ctx);
      } else {
        throw FormatError(ctx + ": unknown key " + std::string(key));
      }
    }
    if (au <= 0 || !has_landmarks || !has_weights)
      throw FormatError(ctx + ": au, landmarks and weights are required");
    auto it = std::find_if(entries.begin(), entries.end(),
                           [&](const AUEntry& e) { return e.au == au; });
    if (it == entries.end()) {
      entries.push_back(AUEntry{static_cast<int>(au), {}});
      it = entries.end() - 1;
    }
    it->centers.push_back(std::move(def));
  }
  try {
    return AUCenterTable(std::move(entries));
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
}

AUCenterTable AUCenterTable::load(const std::filesystem::path& path) {
  return parse(read_file(path));
}

AUCenterTable AUCenterTable::bp4d() { return parse(kBp4dTable); }
AUCenterTable AUCenterTable::disfa() { return parse(kDisfaTable); }

AUCenterTable AUCenterTable::named_or_file(const std::string& spec) {
  if (spec == "bp4d") return bp4d();
  if (spec == "disfa") return disfa();
  return load(spec);
}

std::string AUCenterTable::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "version=1\n";
  for (const auto& e : entries_)
    for (const auto& c : e.centers) {
      out << "au=" << e.au << " landmarks=";
      for (std::size_t i = 0; i < c.landmarks.size(); ++i) out << (i ? "," : "") << c.landmarks[i];
      out << " weights=";
      for (std::size_t i = 0; i < c.weights.size(); ++i) out << (i ? "," : "") << c.weights[i];
      out << " dy=" << c.dy << '\n';
    }
  return out.str();
}

std::vector<int> AUCenterTable::au_ids() const {
  std::vector<int> ids;
  for (const auto& e : entries_) ids.push_back(e.au);
  return ids;
}

AUCenterTable AUCenterTable::subset(const std::vector<int>& ids) const {
  std::vector<AUEntry> out;
  for (int id : ids) {
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const AUEntry& e) { return e.au == id; });
    if (it == entries_.end()) throw ConfigError("AU " + std::to_string(id) + " not in table");
    out.push_back(*it);
  }
  return AUCenterTable(std::move(out));
}

std::vector<std::vector<Point>> au_centers(const LandmarkSet& landmarks,
                                           const AUCenterTable& table) {
  const double iod = landmarks.inter_ocular();
  std::vector<std::vector<Point>> out;
  out.reserve(table.size());
  for (const auto& e : table.entries()) {
    std::vector<Point> centers;
    for (const auto& c : e.centers) {
      Point p{};
      for (std::size_t i = 0; i < c.landmarks.size(); ++i) {
        p.x += c.weights[i] * landmarks[c.landmarks[i]].x;
        p.y += c.weights[i] * landmarks[c.landmarks[i]].y;
      }
      p.y += c.dy * iod;
      p.x = std::clamp(p.x, 0.0, 1.0);
      p.y = std::clamp(p.y, 0.0, 1.0);
      centers.push_back(p);
    }
    out.push_back(std::move(centers));
  }
  return out;
}

Tensor generate_mask(const std::vector<std::vector<Point>>& centers, GridShape grid,
                     double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("generate_mask: sigma must be positive");
  if (centers.empty() || grid.cells() == 0)
    throw ShapeError("generate_mask: need at least one AU and a non-empty grid");
  const std::size_t N = centers.size();
  Tensor mask({N, grid.height, grid.width});
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t i = 0; i < N; ++i)
    for (const auto& c : centers[i]) {
      const double ch = c.y * static_cast<double>(grid.height) - 0.5;
      const double cw = c.x * static_cast<double>(grid.width) - 0.5;
      for (std::size_t h = 0; h < grid.height; ++h)
        for (std::size_t w = 0; w < grid.width; ++w) {
          const double dh = static_cast<double>(h) - ch;
          const double dw = static_cast<double>(w) - cw;
          double& cell = mask[(i * grid.height + h) * grid.width + w];
          cell = std::max(cell, std::exp(-(dh * dh + dw * dw) * inv));
        }
    }
  // Peak-normalize so a center falling between grid points still yields 1.
  const std::size_t cells = grid.cells();
  for (std::size_t i = 0; i < N; ++i) {
    double* m = mask.data().data() + i * cells;
    const double peak = *std::max_element(m, m + cells);
    if (peak > 0.0 && peak < 1.0)
      for (std::size_t c = 0; c < cells; ++c) m[c] = std::min(1.0, m[c] / peak);
  }
  return mask;
}

Tensor au_heatmap(const LandmarkSet& landmarks, const AUCenterTable& table, GridShape grid,
                  double sigma) {
  return generate_mask(au_centers(landmarks, table), grid, sigma);
}

std::pair<std::size_t, std::size_t> grid_cell(const Point& p, GridShape grid) {
  auto cell = [](double v, std::size_t n) {
    const auto i = static_cast<long>(std::floor(v * static_cast<double>(n)));
    return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(n) - 1));
  };
  return {cell(p.y, grid.height), cell(p.x, grid.width)};
}

}  // namespace autt
