#include "autt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include "autt/backbone.hpp"
#include "autt/error.hpp"

namespace autt {
namespace {

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

Point cell_center(std::pair<std::size_t, std::size_t> cell, GridShape grid) {
  return {(static_cast<double>(cell.second) + 0.5) / static_cast<double>(grid.width),
          (static_cast<double>(cell.first) + 0.5) / static_cast<double>(grid.height)};
}

// Adds an oriented bar centered at normalized point c.
void draw_bar(Tensor& image, Point c, double angle, const SyntheticSpec& spec) {
  const std::size_t S = image.dim(0), C = image.dim(2);
  const double cx = c.x * static_cast<double>(S), cy = c.y * static_cast<double>(S);
  const double ux = std::cos(angle), uy = std::sin(angle);
  const double half = spec.stamp_length / 2.0;
  const double reach = half + spec.stamp_thickness + 1.0;
  const auto lo = [&](double v) {
    return static_cast<std::size_t>(std::clamp(std::floor(v - reach), 0.0, static_cast<double>(S)));
  };
  const auto hi = [&](double v) {
    return static_cast<std::size_t>(std::clamp(std::ceil(v + reach), 0.0, static_cast<double>(S)));
  };
  for (std::size_t r = lo(cy); r < hi(cy); ++r)
    for (std::size_t col = lo(cx); col < hi(cx); ++col) {
      const double px = static_cast<double>(col) + 0.5 - cx;
      const double py = static_cast<double>(r) + 0.5 - cy;
      const double along = std::clamp(px * ux + py * uy, -half, half);
      const double dist = std::hypot(px - along * ux, py - along * uy);
      const double v = spec.stamp_amplitude * std::max(0.0, 1.0 - dist / spec.stamp_thickness);
      if (v <= 0.0) continue;
      for (std::size_t ch = 0; ch < C; ++ch) image[(r * S + col) * C + ch] += v;
    }
}

std::vector<std::vector<Point>> snapped_centers(const LandmarkSet& lm, const AUCenterTable& table,
                                                GridShape grid) {
  auto centers = au_centers(lm, table);
  for (auto& list : centers)
    for (auto& p : list) p = cell_center(grid_cell(p, grid), grid);
  return centers;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<int> Dataset::subjects() const {
  std::vector<int> out;
  std::set<int> seen;
  for (const auto& s : samples)
    if (seen.insert(s.subject).second) out.push_back(s.subject);
  return out;
}

std::vector<double> Dataset::label_rates() const {
  std::vector<double> rates(n_au(), 0.0);
  for (const auto& s : samples)
    for (std::size_t i = 0; i < rates.size(); ++i) rates[i] += s.labels[i];
  for (auto& r : rates) r /= std::max<double>(1.0, static_cast<double>(samples.size()));
  return rates;
}

Dataset select_subjects(const Dataset& data, const std::vector<int>& subjects) {
  Dataset out = data;
  out.samples.clear();
  const std::set<int> keep(subjects.begin(), subjects.end());
  for (const auto& s : data.samples)
    if (keep.count(s.subject)) out.samples.push_back(s);
  return out;
}

// ---- synthetic ----------------------------------------------------------------

void SyntheticSpec::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    throw ConfigError("data: image_size must be a positive multiple of patch_size");
  if (channels == 0) throw ConfigError("data: channels must be positive");
  if (au_ids.empty()) throw ConfigError("data: au_ids must not be empty");
  if (rates.size() != au_ids.size())
    throw ConfigError("data: " + std::to_string(rates.size()) + " rates for " +
                      std::to_string(au_ids.size()) + " AUs");
  for (double r : rates)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("data: rates must lie in [0, 1]");
  if (!(mask_sigma > 0.0)) throw ConfigError("data: mask_sigma must be positive");
  if (noise < 0.0 || subject_jitter < 0.0 || point_jitter < 0.0 || landmark_shift < 0.0)
    throw ConfigError("data: noise and jitter levels must be non-negative");
  if (!(distractor_rate >= 0.0 && distractor_rate <= 1.0))
    throw ConfigError("data: distractor_rate must lie in [0, 1]");
  if (subjects == 0 || samples_per_subject == 0)
    throw ConfigError("data: subjects and samples_per_subject must be positive");
}

SyntheticSpec SyntheticSpec::from_config(const KeyValueConfig& c, const std::string& section) {
  const std::string s = section + ".";
  SyntheticSpec d;
  d.image_size = c.get_size(s + "image_size", c.get_size("model.image_size", d.image_size));
  d.channels = c.get_size(s + "channels", c.get_size("model.channels", d.channels));
  d.patch_size = c.get_size(s + "patch_size", c.get_size("model.patch_size", d.patch_size));
  d.au_ids = c.get_ints(s + "au_ids", d.au_ids);
  d.au_table = c.get_string(s + "au_table", d.au_table);
  d.rates = c.get_doubles(s + "rates", std::vector<double>(d.au_ids.size(), 0.5));
  d.mask_sigma = c.get_double(s + "mask_sigma", d.mask_sigma);
  d.noise = c.get_double(s + "noise", d.noise);
  d.stamp_amplitude = c.get_double(s + "stamp_amplitude", d.stamp_amplitude);
  d.stamp_length = c.get_double(s + "stamp_length", d.stamp_length);
  d.stamp_thickness = c.get_double(s + "stamp_thickness", d.stamp_thickness);
  d.distractor_rate = c.get_double(s + "distractor_rate", d.distractor_rate);
  d.subject_jitter = c.get_double(s + "subject_jitter", d.subject_jitter);
  d.point_jitter = c.get_double(s + "point_jitter", d.point_jitter);
  d.brightness = c.get_double(s + "brightness", d.brightness);
  d.contrast = c.get_double(s + "contrast", d.contrast);
  d.landmark_shift = c.get_double(s + "landmark_shift", d.landmark_shift);
  d.subjects = c.get_size(s + "subjects", d.subjects);
  d.samples_per_subject = c.get_size(s + "samples_per_subject", d.samples_per_subject);
  d.seed = static_cast<std::uint64_t>(c.get_long(s + "seed", static_cast<long>(d.seed)));
  d.validate();
  return d;
}

void SyntheticSpec::write_to(KeyValueConfig& c, const std::string& section) const {
  const std::string s = section + ".";
  c.set(s + "image_size", std::to_string(image_size));
  c.set(s + "channels", std::to_string(channels));
  c.set(s + "patch_size", std::to_string(patch_size));
  c.set(s + "au_ids", join_numbers(au_ids));
  c.set(s + "au_table", au_table);
  c.set(s + "rates", join_numbers(rates));
  c.set(s + "mask_sigma", format_double(mask_sigma));
  c.set(s + "noise", format_double(noise));
  c.set(s + "stamp_amplitude", format_double(stamp_amplitude));
  c.set(s + "stamp_length", format_double(stamp_length));
  c.set(s + "stamp_thickness", format_double(stamp_thickness));
  c.set(s + "distractor_rate", format_double(distractor_rate));
  c.set(s + "subject_jitter", format_double(subject_jitter));
  c.set(s + "point_jitter", format_double(point_jitter));
  c.set(s + "brightness", format_double(brightness));
  c.set(s + "contrast", format_double(contrast));
  c.set(s + "landmark_shift", format_double(landmark_shift));
  c.set(s + "subjects", std::to_string(subjects));
  c.set(s + "samples_per_subject", std::to_string(samples_per_subject));
  c.set(s + "seed", std::to_string(seed));
}

SubjectTraits subject_traits(const SyntheticSpec& spec, int subject) {
  auto rng = seeded(spec.seed, 0x5b, static_cast<std::uint64_t>(subject));
  std::normal_distribution<double> n(0.0, 1.0);
  SubjectTraits t;
  t.id = subject;
  t.dx = spec.subject_jitter * n(rng);
  t.dy = spec.subject_jitter * n(rng);
  return t;
}

Sample generate_sample(const SyntheticSpec& spec, const SubjectTraits& subject,
                       std::mt19937_64& rng) {
  spec.validate();
  const AUCenterTable table = AUCenterTable::named_or_file(spec.au_table).subset(spec.au_ids);
  const GridShape grid = spec.grid();
  const std::size_t S = spec.image_size, N = spec.au_ids.size();
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Sample s;
  s.subject = subject.id;
  const double point_std = std::hypot(spec.point_jitter, spec.landmark_shift);
  std::array<Point, kLandmarkCount> pts = canonical_face().points();
  for (auto& p : pts) {
    p.x = std::clamp(p.x + subject.dx + point_std * gauss(rng), 0.0, 1.0);
    p.y = std::clamp(p.y + subject.dy + point_std * gauss(rng), 0.0, 1.0);
  }
  s.landmarks = LandmarkSet(pts);

  for (std::size_t i = 0; i < N; ++i) s.labels.push_back(unit(rng) < spec.rates[i] ? 1 : 0);

  const auto centers = snapped_centers(s.landmarks, table, grid);
  s.mask = generate_mask(centers, grid, spec.mask_sigma);

  std::set<std::pair<std::size_t, std::size_t>> au_cells;
  for (const auto& list : centers)
    for (const auto& c : list) au_cells.insert(grid_cell(c, grid));
  std::vector<std::pair<std::size_t, std::size_t>> free_cells;
  for (std::size_t h = 0; h < grid.height; ++h)
    for (std::size_t w = 0; w < grid.width; ++w)
      if (!au_cells.count({h, w})) free_cells.emplace_back(h, w);

  s.image = Tensor({S, S, spec.channels});
  for (std::size_t i = 0; i < N; ++i) {
    const double angle = std::numbers::pi * static_cast<double>(i) / static_cast<double>(N);
    if (s.labels[i]) {
      for (const auto& c : centers[i]) draw_bar(s.image, c, angle, spec);
    } else if (!free_cells.empty() && unit(rng) < spec.distractor_rate) {
      const auto pick = static_cast<std::size_t>(unit(rng) * static_cast<double>(free_cells.size()));
      draw_bar(s.image, cell_center(free_cells[std::min(pick, free_cells.size() - 1)], grid), angle, spec);
    }
  }
  for (double& v : s.image.data())
    v = spec.contrast * v + spec.brightness + spec.noise * gauss(rng);
  return s;
}

Sample generate_sample(const SyntheticSpec& spec, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, static_cast<int>(spec.subjects) - 1);
  return generate_sample(spec, subject_traits(spec, pick(rng)), rng);
}

Dataset generate_dataset(const SyntheticSpec& spec, std::size_t threads) {
  spec.validate();
  Dataset data;
  data.au_ids = spec.au_ids;
  data.image_size = spec.image_size;
  data.channels = spec.channels;
  data.grid = spec.grid();
  data.mask_sigma = spec.mask_sigma;
  spec.write_to(data.provenance);
  const std::size_t total = spec.subjects * spec.samples_per_subject;
  data.samples.resize(total);
  auto work = [&](std::size_t worker, std::size_t workers) {
    for (std::size_t idx = worker; idx < total; idx += workers) {
      const auto subject = static_cast<int>(idx / spec.samples_per_subject);
      auto rng = seeded(spec.seed, static_cast<std::uint64_t>(subject) + 1, idx);
      data.samples[idx] = generate_sample(spec, subject_traits(spec, subject), rng);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, total));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w, threads);
    for (auto& t : pool) t.join();
  }
  return data;
}

// ---- files --------------------------------------------------------------------

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  if (data.samples.empty()) throw Error("save_dataset: empty dataset");
  const std::size_t n = data.size(), S = data.image_size, C = data.channels, N = data.n_au();
  const std::size_t cells = data.grid.cells();
  Tensor images({n, S, S, C}), landmarks({n, kLandmarkCount, 2}), labels({n, N}), subjects({n});
  Tensor masks({n, N, data.grid.height, data.grid.width});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = data.samples[i];
    if (s.image.shape() != Shape{S, S, C}) throw ShapeError("save_dataset: image shape mismatch");
    std::copy(s.image.data().begin(), s.image.data().end(), images.data().begin() + i * S * S * C);
    std::copy(s.mask.data().begin(), s.mask.data().end(), masks.data().begin() + i * N * cells);
    for (std::size_t p = 0; p < kLandmarkCount; ++p) {
      landmarks[(i * kLandmarkCount + p) * 2] = s.landmarks[p].x;
      landmarks[(i * kLandmarkCount + p) * 2 + 1] = s.landmarks[p].y;
    }
    for (std::size_t a = 0; a < N; ++a) labels[i * N + a] = s.labels[a];
    subjects[i] = s.subject;
  }
  Tensor ids({N});
  for (std::size_t a = 0; a < N; ++a) ids[a] = data.au_ids[a];
  KeyValueConfig header = data.provenance;
  header.set("dataset.mask_sigma", format_double(data.mask_sigma));
  header.set("dataset.grid", std::to_string(data.grid.height) + "," + std::to_string(data.grid.width));
  TensorArchive archive;
  archive.header = header.to_text();
  archive.tensors = {{"au_ids", ids},       {"images", images},   {"landmarks", landmarks},
                     {"labels", labels},    {"masks", masks},     {"subjects", subjects}};
  write_archive(path, archive);
}

Dataset load_dataset(const std::filesystem::path& path) {
  const TensorArchive archive = read_archive(path);
  Dataset data;
  data.provenance = KeyValueConfig::parse(archive.header);
  data.mask_sigma = data.provenance.get_double("dataset.mask_sigma", 1.0);
  const auto grid = data.provenance.get_sizes("dataset.grid", {});
  if (grid.size() != 2) throw FormatError("dataset header lacks dataset.grid");
  data.grid = {grid[0], grid[1]};
  const Tensor& ids = archive.get("au_ids");
  const Tensor& images = archive.get("images");
  const Tensor& landmarks = archive.get("landmarks");
  const Tensor& labels = archive.get("labels");
  const Tensor& masks = archive.get("masks");
  const Tensor& subjects = archive.get("subjects");
  if (images.rank() != 4) throw FormatError("dataset images must be [N, S, S, C]");
  const std::size_t n = images.dim(0), S = images.dim(1), C = images.dim(3), N = ids.numel();
  const std::size_t cells = data.grid.cells();
  if (landmarks.shape() != Shape{n, kLandmarkCount, 2} || labels.shape() != Shape{n, N} ||
      masks.shape() != Shape{n, N, data.grid.height, data.grid.width} || subjects.numel() != n)
    throw FormatError("dataset tensors have inconsistent shapes");
  for (std::size_t a = 0; a < N; ++a) data.au_ids.push_back(static_cast<int>(ids[a]));
  data.image_size = S;
  data.channels = C;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.image = Tensor({S, S, C}, std::vector<double>(images.data().begin() + i * S * S * C,
                                                    images.data().begin() + (i + 1) * S * S * C));
    s.mask = Tensor({N, data.grid.height, data.grid.width},
                    std::vector<double>(masks.data().begin() + i * N * cells,
                                        masks.data().begin() + (i + 1) * N * cells));
    std::array<Point, kLandmarkCount> pts{};
    for (std::size_t p = 0; p < kLandmarkCount; ++p)
      pts[p] = {landmarks[(i * kLandmarkCount + p) * 2], landmarks[(i * kLandmarkCount + p) * 2 + 1]};
    s.landmarks = LandmarkSet(pts);
    for (std::size_t a = 0; a < N; ++a) s.labels.push_back(labels[i * N + a] != 0.0 ? 1 : 0);
    s.subject = static_cast<int>(subjects[i]);
    data.samples.push_back(std::move(s));
  }
  return data;
}

// ---- real images ----------------------------------------------------------------

namespace {

struct RawImage {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<unsigned char> pixels;
};

RawImage read_pnm(const std::filesystem::path& path) {
  const std::string bytes = read_text(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  const std::string magic = token();
  RawImage img;
  if (magic == "P5") img.channels = 1;
  else if (magic == "P6") img.channels = 3;
  else throw FormatError(path.string() + ": only binary PGM (P5) and PPM (P6) are supported");
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw FormatError(path.string() + ": only 8-bit images are supported");
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": malformed header");
  }
  ++pos;
  const std::size_t need = img.width * img.height * img.channels;
  if (bytes.size() < pos + need) throw FormatError(path.string() + ": truncated pixel data");
  img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + need));
  return img;
}

std::vector<Point> read_pts(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::vector<Point> pts;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    double x = 0, y = 0;
    if (ls >> x >> y) pts.push_back({x, y});
  }
  if (pts.size() != kLandmarkCount)
    throw FormatError(path.string() + ": expected 68 landmarks, found " + std::to_string(pts.size()));
  return pts;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    while (!cell.empty() && std::isspace(static_cast<unsigned char>(cell.back()))) cell.pop_back();
    out.push_back(cell);
  }
  return out;
}

}  // namespace

Dataset load_image_directory(const std::filesystem::path& dir, std::size_t image_size,
                             std::size_t patch_size, const AUCenterTable& table,
                             double mask_sigma) {
  std::ifstream csv(dir / "labels.csv");
  if (!csv) throw FormatError("missing " + (dir / "labels.csv").string());
  std::string line;
  if (!std::getline(csv, line)) throw FormatError("labels.csv is empty");
  const auto header = split_csv(line);
  if (header.size() < 3 || header[0] != "file" || header[1] != "subject")
    throw FormatError("labels.csv header must start with file,subject,AU<id>");
  Dataset data;
  for (std::size_t i = 2; i < header.size(); ++i) {
    if (header[i].rfind("AU", 0) != 0) throw FormatError("labels.csv: bad AU column " + header[i]);
    data.au_ids.push_back(std::stoi(header[i].substr(2)));
  }
  const AUCenterTable sub = table.subset(data.au_ids);
  if (image_size % patch_size != 0) throw ConfigError("image_size must be a multiple of patch_size");
  data.image_size = image_size;
  data.grid = {image_size / patch_size, image_size / patch_size};
  data.mask_sigma = mask_sigma;
  data.provenance.set("data.source", dir.string());
  std::size_t row = 1;
  while (std::getline(csv, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw FormatError("labels.csv row " + std::to_string(row) + " has the wrong column count");
    const auto img = read_pnm(dir / cells[0]);
    if (data.channels == 0) data.channels = img.channels;
    if (img.channels != data.channels) throw FormatError("mixed grayscale and color images");
    Sample s;
    s.subject = std::stoi(cells[1]);
    for (std::size_t i = 2; i < cells.size(); ++i) s.labels.push_back(std::stoi(cells[i]) != 0 ? 1 : 0);
    s.image = Tensor({image_size, image_size, img.channels});
    for (std::size_t r = 0; r < image_size; ++r)
      for (std::size_t c = 0; c < image_size; ++c) {
        const std::size_t sr = r * img.height / image_size, sc = c * img.width / image_size;
        for (std::size_t ch = 0; ch < img.channels; ++ch)
          s.image[(r * image_size + c) * img.channels + ch] =
              img.pixels[(sr * img.width + sc) * img.channels + ch] / 255.0;
      }
    const auto raw = read_pts((dir / cells[0]).replace_extension(".pts"));
    std::array<Point, kLandmarkCount> pts{};
    for (std::size_t p = 0; p < kLandmarkCount; ++p)
      pts[p] = {std::clamp(raw[p].x / static_cast<double>(img.width), 0.0, 1.0),
                std::clamp(raw[p].y / static_cast<double>(img.height), 0.0, 1.0)};
    s.landmarks = LandmarkSet(pts);
    s.mask = au_heatmap(s.landmarks, sub, data.grid, mask_sigma);
    data.samples.push_back(std::move(s));
  }
  if (data.samples.empty()) throw FormatError("labels.csv lists no images");
  return data;
}

}  // namespace autt
