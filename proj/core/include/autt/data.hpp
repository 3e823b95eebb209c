#pragma once

// Datasets: synthetic faces with known AU ground truth, binary dataset files
// and a loader for real image directories.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "autt/config.hpp"
#include "autt/landmarks.hpp"
#include "autt/scanning.hpp"
#include "autt/tensor.hpp"

namespace autt {

struct Sample {
  Tensor image;  // [S, S, C], values roughly in [0, 1]
  LandmarkSet landmarks;
  std::vector<int> labels;  // 0/1 per AU
  Tensor mask;              // [N_AU, H', W']
  int subject = 0;
};

struct Dataset {
  std::vector<int> au_ids;
  std::size_t image_size = 0;
  std::size_t channels = 0;
  GridShape grid;
  double mask_sigma = 1.0;
  std::vector<Sample> samples;
  /// Settings that produced the data, echoed into dataset files.
  KeyValueConfig provenance;

  std::size_t size() const noexcept { return samples.size(); }
  std::size_t n_au() const noexcept { return au_ids.size(); }
  /// Distinct subject ids in first-appearance order.
  std::vector<int> subjects() const;
  /// Per-AU fraction of positive labels.
  std::vector<double> label_rates() const;
};

/// Samples whose subject is in `subjects`, in original order.
Dataset select_subjects(const Dataset& data, const std::vector<int>& subjects);

struct SyntheticSpec {
  std::size_t image_size = 48;
  std::size_t channels = 1;
  std::size_t patch_size = 8;  // defines the grid the stamps snap to
  std::vector<int> au_ids{1, 6, 12, 17};
  std::string au_table = "bp4d";
  std::vector<double> rates{0.5, 0.5, 0.5, 0.5};
  double mask_sigma = 1.0;  // grid units
  double noise = 0.05;
  double stamp_amplitude = 0.8;
  double stamp_length = 7.0;     // pixels
  double stamp_thickness = 1.2;  // pixels
  /// Probability per inactive AU of drawing its stamp in a wrong cell.
  double distractor_rate = 0.0;
  double subject_jitter = 0.02;  // per-subject landmark offset std, normalized units
  double point_jitter = 0.003;   // per-sample landmark noise std
  // Domain shift.
  double brightness = 0.0;
  double contrast = 1.0;
  double landmark_shift = 0.0;  // extra per-sample landmark noise std
  std::size_t subjects = 9;
  std::size_t samples_per_subject = 16;
  std::uint64_t seed = 1;

  void validate() const;
  GridShape grid() const { return {image_size / patch_size, image_size / patch_size}; }

  /// Reads keys under `section.` (e.g. "data").
  static SyntheticSpec from_config(const KeyValueConfig& cfg, const std::string& section = "data");
  void write_to(KeyValueConfig& cfg, const std::string& section = "data") const;
};

/// Per-subject landmark template.
struct SubjectTraits {
  int id = 0;
  double dx = 0.0;
  double dy = 0.0;
};

SubjectTraits subject_traits(const SyntheticSpec& spec, int subject);

/// Draws labels with probability rates[i], renders each active AU's oriented
/// bar at its center cells, then distractors, contrast/brightness and noise.
Sample generate_sample(const SyntheticSpec& spec, const SubjectTraits& subject,
                       std::mt19937_64& rng);
/// Subject drawn uniformly from the spec's subjects.
Sample generate_sample(const SyntheticSpec& spec, std::mt19937_64& rng);

/// subjects x samples_per_subject samples. Each sample has its own generator
/// seeded from (seed, subject, index), so `threads` does not change the result.
Dataset generate_dataset(const SyntheticSpec& spec, std::size_t threads = 1);

/// Binary dataset file in the tensor archive container.
void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

/// Real-data layout:
///   <dir>/labels.csv   header `file,subject,AU<id>,...`, one row per image
///   <dir>/<file>       binary PGM (P5) or PPM (P6), 8-bit, square
///   <dir>/<stem>.pts   68 landmarks, `x y` pixel coordinates per line (an
///                      optional `version/n_points/{ }` wrapper is accepted)
/// Images are resampled to `image_size` by nearest neighbour.
Dataset load_image_directory(const std::filesystem::path& dir, std::size_t image_size,
                             std::size_t patch_size, const AUCenterTable& table,
                             double mask_sigma);

}  // namespace autt
