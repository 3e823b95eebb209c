#pragma once

// Patch embedding, the AU-TTT block stack and the prediction heads.
//
// Token layout everywhere: J = H' * W' patch tokens in row-major grid order,
// then one CLS token.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "autt/autodiff.hpp"
#include "autt/config.hpp"
#include "autt/landmarks.hpp"
#include "autt/scanning.hpp"
#include "autt/ttt.hpp"

namespace autt {

struct ModelConfig {
  std::size_t image_size = 224;
  std::size_t channels = 3;
  std::size_t patch_size = 16;
  std::size_t embed_dim = 384;
  std::size_t depth = 12;
  std::size_t heads = 6;
  std::vector<std::size_t> dilation_rates{1, 3, 5};
  std::size_t n_au = 12;
  std::size_t minibatch_b = 0;  // 0 selects image_size / patch_size
  std::size_t mlp_ratio = 4;
  double eta = 1.0;
  bool train_eta = false;
  double w0_std = 0.0;
  // Branch switches for ablations.
  bool use_backward = true;
  bool use_au_roi = true;
  bool use_msp = true;

  void validate() const;
  GridShape grid() const;
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t block_size() const;

  /// Reads `model.*` keys; missing keys keep the defaults above.
  static ModelConfig from_config(const KeyValueConfig& cfg);
  /// Writes every field as `model.*` keys.
  void write_to(KeyValueConfig& cfg) const;
};

template <class T>
struct NormParamsT {
  T scale;  // [1, D]
  T shift;  // [1, D]

  template <class F>
  auto map(F&& f, const std::string& prefix = "") const {
    using U = decltype(f(prefix, scale));
    return NormParamsT<U>{f(prefix + "scale", scale), f(prefix + "shift", shift)};
  }
  template <class Self, class F>
  static void each(Self& self, F&& f, const std::string& prefix) {
    f(prefix + "scale", self.scale);
    f(prefix + "shift", self.shift);
  }
};

template <class T>
struct MLPParamsT {
  T w1;  // [D, hidden]
  T b1;  // [1, hidden]
  T w2;  // [hidden, D]
  T b2;  // [1, D]

  template <class F>
  auto map(F&& f, const std::string& prefix = "") const {
    using U = decltype(f(prefix, w1));
    return MLPParamsT<U>{f(prefix + "w1", w1), f(prefix + "b1", b1), f(prefix + "w2", w2),
                         f(prefix + "b2", b2)};
  }
  template <class Self, class F>
  static void each(Self& self, F&& f, const std::string& prefix) {
    f(prefix + "w1", self.w1);
    f(prefix + "b1", self.b1);
    f(prefix + "w2", self.w2);
    f(prefix + "b2", self.b2);
  }
};

template <class T>
struct BlockParamsT {
  NormParamsT<T> norm1;
  BiTTTParamsT<T> bi;
  TTTParamsT<T> au;
  std::vector<T> msp;  // one [D, 3, 3] depthwise kernel per dilation rate
  NormParamsT<T> norm2;
  MLPParamsT<T> mlp;

  template <class F>
  auto map(F&& f, const std::string& prefix = "") const {
    using U = decltype(f(prefix, norm1.scale));
    BlockParamsT<U> out{norm1.map(f, prefix + "norm1."), bi.map(f, prefix + "bi."),
                        au.map(f, prefix + "au."), {}, norm2.map(f, prefix + "norm2."),
                        mlp.map(f, prefix + "mlp.")};
    for (std::size_t i = 0; i < msp.size(); ++i)
      out.msp.push_back(f(prefix + "msp." + std::to_string(i), msp[i]));
    return out;
  }
  template <class Self, class F>
  static void each(Self& self, F&& f, const std::string& prefix) {
    NormParamsT<T>::each(self.norm1, f, prefix + "norm1.");
    self.bi.visit(f, prefix + "bi.");
    self.au.visit(f, prefix + "au.");
    for (std::size_t i = 0; i < self.msp.size(); ++i)
      f(prefix + "msp." + std::to_string(i), self.msp[i]);
    NormParamsT<T>::each(self.norm2, f, prefix + "norm2.");
    MLPParamsT<T>::each(self.mlp, f, prefix + "mlp.");
  }
};

template <class T>
struct PatchEmbedParamsT {
  T proj;  // [P*P*C, D]
  T pos;   // [J+1, D]
  T cls;   // [1, D]

  template <class F>
  auto map(F&& f, const std::string& prefix = "") const {
    using U = decltype(f(prefix, proj));
    return PatchEmbedParamsT<U>{f(prefix + "proj", proj), f(prefix + "pos", pos),
                                f(prefix + "cls", cls)};
  }
  template <class Self, class F>
  static void each(Self& self, F&& f, const std::string& prefix) {
    f(prefix + "proj", self.proj);
    f(prefix + "pos", self.pos);
    f(prefix + "cls", self.cls);
  }
};

/// Column i of cls_w / map_w (and entry i of the biases) belongs to AU i.
template <class T>
struct HeadParamsT {
  NormParamsT<T> norm;
  T cls_w;  // [D, N_AU]
  T cls_b;  // [1, N_AU]
  T map_w;  // [D, N_AU]
  T map_b;  // [1, N_AU]

  template <class F>
  auto map(F&& f, const std::string& prefix = "") const {
    using U = decltype(f(prefix, cls_w));
    return HeadParamsT<U>{norm.map(f, prefix + "norm."), f(prefix + "cls_w", cls_w),
                          f(prefix + "cls_b", cls_b), f(prefix + "map_w", map_w),
                          f(prefix + "map_b", map_b)};
  }
  template <class Self, class F>
  static void each(Self& self, F&& f, const std::string& prefix) {
    NormParamsT<T>::each(self.norm, f, prefix + "norm.");
    f(prefix + "cls_w", self.cls_w);
    f(prefix + "cls_b", self.cls_b);
    f(prefix + "map_w", self.map_w);
    f(prefix + "map_b", self.map_b);
  }
};

template <class T>
struct ModelParamsT {
  PatchEmbedParamsT<T> embed;
  std::vector<BlockParamsT<T>> blocks;
  HeadParamsT<T> head;

  template <class F>
  auto map(F&& f) const {
    using U = decltype(f(std::string(), embed.proj));
    ModelParamsT<U> out{embed.map(f, "embed."), {}, head.map(f, "head.")};
    for (std::size_t l = 0; l < blocks.size(); ++l)
      out.blocks.push_back(blocks[l].map(f, "blocks." + std::to_string(l) + "."));
    return out;
  }
  /// Calls f(name, param) for every parameter in a fixed order.
  template <class F>
  void visit(F&& f) {
    each(*this, f);
  }
  template <class F>
  void visit(F&& f) const {
    each(*this, f);
  }

 private:
  template <class Self, class F>
  static void each(Self& self, F& f) {
    PatchEmbedParamsT<T>::each(self.embed, f, "embed.");
    for (std::size_t l = 0; l < self.blocks.size(); ++l)
      BlockParamsT<T>::each(self.blocks[l], f, "blocks." + std::to_string(l) + ".");
    HeadParamsT<T>::each(self.head, f, "head.");
  }
};

using BlockParams = BlockParamsT<Tensor>;
using BlockVars = BlockParamsT<Var>;
using PatchEmbedParams = PatchEmbedParamsT<Tensor>;
using PatchEmbedVars = PatchEmbedParamsT<Var>;
using ModelParams = ModelParamsT<Tensor>;
using ModelVars = ModelParamsT<Var>;

/// Random initialization for training; norms start at scale 1, shift 0.
ModelParams init_model(const ModelConfig& cfg, std::mt19937_64& rng);
/// Every parameter zero except norm scales (one) and eta (cfg.eta).
ModelParams zero_model(const ModelConfig& cfg);
/// Checks every parameter shape against cfg and that all values are finite.
void validate(const ModelParams& params, const ModelConfig& cfg);
std::size_t parameter_count(const ModelParams& params);

/// Lifts parameters onto a tape. Every tensor becomes a trainable leaf
/// except eta entries when cfg.train_eta is false.
ModelVars lift(Tape& tape, const ModelParams& params, const ModelConfig& cfg);

/// image [H, W, C] -> [J, P*P*C], patches in row-major order, each patch
/// flattened in (row, col, channel) order.
Tensor patchify(const Tensor& image, std::size_t patch_size);

/// [X W; CLS] + E_pos.
Tensor embed(const Tensor& patches, const PatchEmbedParams& p);
Var embed(const Var& patches, const PatchEmbedVars& p);

/// Per-token layer normalization over the channel axis.
inline constexpr double kLayerNormEpsilon = 1e-5;
Var layer_norm(const Var& x, const NormParamsT<Var>& p);

/// Sum over rates of depthwise 3x3 dilated cross-correlations of the patch
/// grid. seq is [J+1, D]; the CLS row is copied through unchanged.
Tensor msp(const Tensor& seq, const std::vector<Tensor>& kernels,
           const std::vector<std::size_t>& rates, GridShape grid);
/// Grid-only form: patches [J, D] -> [J, D].
Var msp_grid(const Var& patches, std::span<const Var> kernels,
             const std::vector<std::size_t>& rates, GridShape grid);

/// One pre-norm block. Inside the block the MSP branch contributes zero at
/// the CLS position, so a block with zero weights is an exact identity.
Var au_ttt_block(const Var& seq, const Var& mask, const BlockVars& p, const ModelConfig& cfg);
Tensor au_ttt_block(const Tensor& seq, const Tensor& mask, const BlockParams& p,
                    const ModelConfig& cfg);

struct ModelOutput {
  Var logits;   // [1, N_AU]
  Var heatmap;  // [N_AU, H', W']
  Var tokens;   // [J+1, D] after the last block
};

/// Full forward on a tape. image is [H, W, C]; mask is [N_AU, H', W'].
/// Throws DivergenceError carrying the block index on non-finite activations
/// (index depth means the heads).
ModelOutput forward_model(Tape& tape, const Tensor& image, const Tensor& mask,
                          const ModelVars& params, const ModelConfig& cfg);

struct Prediction {
  std::vector<double> logits;
  Tensor heatmap;
  Tensor tokens;
};

Prediction forward_model(const Tensor& image, const Tensor& mask, const ModelParams& params,
                         const ModelConfig& cfg);
/// Builds the mask from landmarks first.
Prediction forward_model(const Tensor& image, const LandmarkSet& landmarks,
                         const AUCenterTable& table, double sigma, const ModelParams& params,
                         const ModelConfig& cfg);

// ---- checkpoint container ---------------------------------------------------

inline constexpr char kArchiveMagic[9] = "AUTTTCKP";
inline constexpr std::uint32_t kArchiveVersion = 1;

/// Versioned header text followed by named tensors.
struct TensorArchive {
  std::string header;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::string encode_archive(const TensorArchive& archive);
TensorArchive decode_archive(std::string_view bytes);
void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  /// Extra configuration echoed into the header (loss, data, ...).
  KeyValueConfig extra;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace autt
