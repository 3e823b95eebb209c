#include "autt/backbone.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "autt/error.hpp"

namespace autt {
namespace {

template <class P>
auto as_constants(Tape& tape, const P& params) {
  return params.map([&](const std::string&, const Tensor& t) { return tape.constant(t); });
}

bool is_eta(const std::string& name) {
  return name.size() >= 3 && name.compare(name.size() - 3, 3, "eta") == 0;
}

NormParamsT<Tensor> unit_norm(std::size_t dim) {
  return {Tensor::ones({1, dim}), Tensor({1, dim})};
}

Var mlp(const Var& x, const MLPParamsT<Var>& p) {
  const Var hidden = gelu(add(matmul(x, p.w1), p.b1));
  return add(matmul(hidden, p.w2), p.b2);
}

void check_finite(const Var& v, std::size_t layer, const char* where) {
  if (!v.value().all_finite())
    throw DivergenceError(std::string("non-finite activations ") + where + " " +
                              std::to_string(layer),
                          static_cast<long>(layer));
}

}  // namespace

// ---- config -------------------------------------------------------------------

void ModelConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || channels == 0)
    throw ConfigError("model: image_size, patch_size and channels must be positive");
  if (image_size % patch_size != 0)
    throw ConfigError("model: image_size " + std::to_string(image_size) +
                      " is not divisible by patch_size " + std::to_string(patch_size));
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0)
    throw ConfigError("model: embed_dim " + std::to_string(embed_dim) +
                      " is not divisible by heads " + std::to_string(heads));
  if (dilation_rates.empty()) throw ConfigError("model: dilation_rates must not be empty");
  for (auto r : dilation_rates)
    if (r == 0) throw ConfigError("model: dilation rates must be positive");
  if (n_au == 0) throw ConfigError("model: n_au must be positive");
  if (mlp_ratio == 0) throw ConfigError("model: mlp_ratio must be positive");
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("model: eta must be >= 0");
  if (!(w0_std >= 0.0)) throw ConfigError("model: w0_std must be >= 0");
}

GridShape ModelConfig::grid() const {
  return {image_size / patch_size, image_size / patch_size};
}

std::size_t ModelConfig::block_size() const {
  return minibatch_b != 0 ? minibatch_b : image_size / patch_size;
}

ModelConfig ModelConfig::from_config(const KeyValueConfig& c) {
  ModelConfig m;
  m.image_size = c.get_size("model.image_size", m.image_size);
  m.channels = c.get_size("model.channels", m.channels);
  m.patch_size = c.get_size("model.patch_size", m.patch_size);
  m.embed_dim = c.get_size("model.embed_dim", m.embed_dim);
  m.depth = c.get_size("model.depth", m.depth);
  m.heads = c.get_size("model.heads", m.heads);
  m.dilation_rates = c.get_sizes("model.dilation_rates", m.dilation_rates);
  m.n_au = c.get_size("model.n_au", m.n_au);
  m.minibatch_b = c.get_size("model.minibatch_b", m.minibatch_b);
  m.mlp_ratio = c.get_size("model.mlp_ratio", m.mlp_ratio);
  m.eta = c.get_double("model.eta", m.eta);
  m.train_eta = c.get_bool("model.train_eta", m.train_eta);
  m.w0_std = c.get_double("model.w0_std", m.w0_std);
  m.use_backward = c.get_bool("model.use_backward", m.use_backward);
  m.use_au_roi = c.get_bool("model.use_au_roi", m.use_au_roi);
  m.use_msp = c.get_bool("model.use_msp", m.use_msp);
  m.validate();
  return m;
}

void ModelConfig::write_to(KeyValueConfig& c) const {
  c.set("model.image_size", std::to_string(image_size));
  c.set("model.channels", std::to_string(channels));
  c.set("model.patch_size", std::to_string(patch_size));
  c.set("model.embed_dim", std::to_string(embed_dim));
  c.set("model.depth", std::to_string(depth));
  c.set("model.heads", std::to_string(heads));
  c.set("model.dilation_rates", join_numbers(dilation_rates));
  c.set("model.n_au", std::to_string(n_au));
  c.set("model.minibatch_b", std::to_string(minibatch_b));
  c.set("model.mlp_ratio", std::to_string(mlp_ratio));
  c.set("model.eta", format_double(eta));
  c.set("model.train_eta", train_eta ? "true" : "false");
  c.set("model.w0_std", format_double(w0_std));
  c.set("model.use_backward", use_backward ? "true" : "false");
  c.set("model.use_au_roi", use_au_roi ? "true" : "false");
  c.set("model.use_msp", use_msp ? "true" : "false");
}

// ---- parameters ---------------------------------------------------------------

ModelParams init_model(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t D = cfg.embed_dim, hidden = cfg.mlp_ratio * D, N = cfg.n_au;
  const std::size_t J = cfg.grid().cells();
  const double inv_d = 1.0 / std::sqrt(static_cast<double>(D));
  const TTTInit tinit{cfg.eta, cfg.w0_std};
  ModelParams p;
  p.embed.proj =
      Tensor::normal({cfg.patch_dim(), D}, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())), rng);
  p.embed.pos = Tensor::normal({J + 1, D}, 0.02, rng);
  p.embed.cls = Tensor::normal({1, D}, 0.02, rng);
  const double msp_std = 1.0 / (3.0 * std::sqrt(static_cast<double>(cfg.dilation_rates.size())));
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    BlockParams b;
    b.norm1 = unit_norm(D);
    b.bi = init_bi_ttt_params(D, cfg.heads, tinit, rng);
    b.au = init_ttt_params(D, cfg.heads, tinit, rng);
    for (std::size_t r = 0; r < cfg.dilation_rates.size(); ++r)
      b.msp.push_back(Tensor::normal({D, 3, 3}, msp_std, rng));
    b.norm2 = unit_norm(D);
    b.mlp.w1 = Tensor::normal({D, hidden}, inv_d, rng);
    b.mlp.b1 = Tensor({1, hidden});
    b.mlp.w2 = Tensor::normal({hidden, D}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
    b.mlp.b2 = Tensor({1, D});
    p.blocks.push_back(std::move(b));
  }
  p.head.norm = unit_norm(D);
  p.head.cls_w = Tensor::normal({D, N}, inv_d, rng);
  p.head.cls_b = Tensor({1, N});
  p.head.map_w = Tensor::normal({D, N}, inv_d, rng);
  p.head.map_b = Tensor({1, N});
  return p;
}

ModelParams zero_model(const ModelConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(0);
  ModelParams p = init_model(cfg, rng);
  p.visit([&](const std::string& name, Tensor& t) {
    const bool unit = name.size() >= 5 && name.compare(name.size() - 5, 5, "scale") == 0;
    const double v = is_eta(name) ? cfg.eta : unit ? 1.0 : 0.0;
    for (double& x : t.data()) x = v;
  });
  return p;
}

void validate(const ModelParams& params, const ModelConfig& cfg) {
  cfg.validate();
  if (params.blocks.size() != cfg.depth)
    throw ShapeError("model has " + std::to_string(params.blocks.size()) + " blocks, config says " +
                     std::to_string(cfg.depth));
  const ModelParams reference = zero_model(cfg);
  std::vector<Shape> shapes;
  std::vector<std::string> names;
  reference.visit([&](const std::string& name, const Tensor& t) {
    names.push_back(name);
    shapes.push_back(t.shape());
  });
  std::size_t i = 0;
  params.visit([&](const std::string& name, const Tensor& t) {
    if (i >= names.size() || names[i] != name)
      throw ShapeError("unexpected parameter " + name);
    if (t.shape() != shapes[i])
      throw ShapeError("parameter " + name + " has shape " + shape_string(t.shape()) +
                       ", expected " + shape_string(shapes[i]));
    if (!t.all_finite()) throw DivergenceError("parameter " + name + " is not finite", -1);
    if (is_eta(name) && t.item() < 0.0) throw ConfigError("parameter " + name + " is negative");
    ++i;
  });
  if (i != names.size()) throw ShapeError("model is missing parameters");
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  params.visit([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

ModelVars lift(Tape& tape, const ModelParams& params, const ModelConfig& cfg) {
  return params.map([&](const std::string& name, const Tensor& t) {
    if (is_eta(name) && !cfg.train_eta) return tape.constant(t);
    return tape.parameter(t);
  });
}

// ---- layers -------------------------------------------------------------------

Tensor patchify(const Tensor& image, std::size_t P) {
  if (image.rank() != 3) throw ShapeError("patchify: expected [H, W, C], got " + shape_string(image.shape()));
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (P == 0 || H % P != 0 || W % P != 0)
    throw ShapeError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                     " is not divisible by patch size " + std::to_string(P));
  const std::size_t gh = H / P, gw = W / P, len = P * P * C;
  Tensor out({gh * gw, len});
  for (std::size_t i = 0; i < gh; ++i)
    for (std::size_t j = 0; j < gw; ++j) {
      double* dst = &out[(i * gw + j) * len];
      for (std::size_t r = 0; r < P; ++r) {
        const double* src = image.data().data() + ((i * P + r) * W + j * P) * C;
        std::memcpy(dst + r * P * C, src, P * C * sizeof(double));
      }
    }
  return out;
}

Tensor embed(const Tensor& patches, const PatchEmbedParams& p) {
  Tape tape(false);
  return embed(tape.constant(patches), as_constants(tape, p)).value();
}

Var embed(const Var& patches, const PatchEmbedVars& p) {
  if (patches.shape().size() != 2 || patches.dim(1) != p.proj.dim(0))
    throw ShapeError("embed: patches " + shape_string(patches.shape()) + " vs projection " +
                     shape_string(p.proj.shape()));
  if (p.pos.dim(0) != patches.dim(0) + 1)
    throw ShapeError("embed: positional table " + shape_string(p.pos.shape()) + " for " +
                     std::to_string(patches.dim(0)) + " patches");
  const Var parts[] = {matmul(patches, p.proj), p.cls};
  return add(concat_rows(parts), p.pos);
}

Var layer_norm(const Var& x, const NormParamsT<Var>& p) {
  const Var xt = transpose(x);  // [D, L]
  const Var centered = sub(xt, mean(xt, 0));
  const Var variance = mean(mul(centered, centered), 0);
  const Var inv_std = exp(scale(log(add_scalar(variance, kLayerNormEpsilon)), -0.5));
  const Var normed = transpose(mul(centered, inv_std));
  return add(mul(normed, p.scale), p.shift);
}

Var msp_grid(const Var& patches, std::span<const Var> kernels,
             const std::vector<std::size_t>& rates, GridShape grid) {
  if (kernels.size() != rates.size())
    throw ShapeError("msp: " + std::to_string(kernels.size()) + " kernels for " +
                     std::to_string(rates.size()) + " rates");
  if (patches.shape().size() != 2 || patches.dim(0) != grid.cells())
    throw ShapeError("msp: patches " + shape_string(patches.shape()) + " do not fill the grid");
  const std::size_t D = patches.dim(1);
  const Var x = reshape(patches, {grid.height, grid.width, D});
  Var total = conv2d_dilated(x, kernels[0], rates[0]);
  for (std::size_t i = 1; i < rates.size(); ++i)
    total = add(total, conv2d_dilated(x, kernels[i], rates[i]));
  return reshape(total, {grid.cells(), D});
}

Tensor msp(const Tensor& seq, const std::vector<Tensor>& kernels,
           const std::vector<std::size_t>& rates, GridShape grid) {
  if (seq.rank() != 2 || seq.dim(0) != grid.tokens())
    throw ShapeError("msp: sequence " + shape_string(seq.shape()) + " does not match grid");
  Tape tape(false);
  const Var s = tape.constant(seq);
  std::vector<Var> ks;
  for (const auto& k : kernels) ks.push_back(tape.constant(k));
  const Var parts[] = {msp_grid(slice_rows(s, 0, grid.cells()), ks, rates, grid),
                       row(s, grid.cells())};
  return concat_rows(parts).value();
}

Var au_ttt_block(const Var& seq, const Var& mask, const BlockVars& p, const ModelConfig& cfg) {
  const GridShape grid = cfg.grid();
  if (seq.shape().size() != 2 || seq.dim(0) != grid.tokens())
    throw ShapeError("au_ttt_block: sequence " + shape_string(seq.shape()) + " for a " +
                     std::to_string(grid.height) + "x" + std::to_string(grid.width) + " grid");
  const std::size_t J = grid.cells(), D = seq.dim(1);
  const Var normed = layer_norm(seq, p.norm1);
  Var branches = bi_ttt(normed, p.bi, cfg.block_size(), cfg.use_backward);
  if (cfg.use_au_roi || cfg.use_msp) {
    const Var patches = slice_rows(normed, 0, J);
    if (cfg.use_au_roi) branches = add(branches, au_roi_ttt(patches, mask, p.au));
    if (cfg.use_msp) {
      const Var parts[] = {msp_grid(patches, p.msp, cfg.dilation_rates, grid),
                           seq.tape().constant(Tensor({1, D}))};
      branches = add(branches, concat_rows(parts));
    }
  }
  const Var mid = add(seq, branches);
  return add(mid, mlp(layer_norm(mid, p.norm2), p.mlp));
}

Tensor au_ttt_block(const Tensor& seq, const Tensor& mask, const BlockParams& p,
                    const ModelConfig& cfg) {
  Tape tape(false);
  return au_ttt_block(tape.constant(seq), tape.constant(mask), as_constants(tape, p), cfg).value();
}

ModelOutput forward_model(Tape& tape, const Tensor& image, const Tensor& mask,
                          const ModelVars& params, const ModelConfig& cfg) {
  const std::size_t S = cfg.image_size;
  if (image.shape() != Shape{S, S, cfg.channels})
    throw ShapeError("forward_model: image " + shape_string(image.shape()) + ", config expects " +
                     shape_string({S, S, cfg.channels}));
  const GridShape grid = cfg.grid();
  validate_mask(mask, grid);
  if (mask.dim(0) != cfg.n_au)
    throw ShapeError("forward_model: mask has " + std::to_string(mask.dim(0)) + " AU channels, config " +
                     std::to_string(cfg.n_au));
  if (params.blocks.size() != cfg.depth) throw ShapeError("forward_model: depth mismatch");
  const std::size_t J = grid.cells(), N = cfg.n_au;
  const Var m = tape.constant(mask);

  Var z = embed(tape.constant(patchify(image, cfg.patch_size)), params.embed);
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    z = au_ttt_block(z, m, params.blocks[l], cfg);
    check_finite(z, l, "in block");
  }

  const Var f = layer_norm(z, params.head.norm);
  const Var spatial = add(matmul(slice_rows(f, 0, J), params.head.map_w), params.head.map_b);  // [J, N]
  const Var per_au = transpose(spatial);                                                         // [N, J]

  Tensor inv_mass({N, 1});
  for (std::size_t i = 0; i < N; ++i) {
    double mass = 0.0;
    for (std::size_t p = 0; p < J; ++p) mass += mask[i * J + p];
    inv_mass[i] = 1.0 / (mass + kScatterEpsilon);
  }
  const Var pooled = mul(sum(mul(per_au, reshape(m, {N, J})), 1), tape.constant(inv_mass));  // [N, 1]
  const Var cls_logit = add(matmul(row(f, J), params.head.cls_w), params.head.cls_b);
  ModelOutput out;
  out.logits = add(cls_logit, transpose(pooled));
  out.heatmap = reshape(per_au, {N, grid.height, grid.width});
  out.tokens = z;
  check_finite(out.logits, cfg.depth, "in heads after block");
  return out;
}

Prediction forward_model(const Tensor& image, const Tensor& mask, const ModelParams& params,
                         const ModelConfig& cfg) {
  Tape tape(false);
  const ModelOutput out = forward_model(tape, image, mask, as_constants(tape, params), cfg);
  return {out.logits.value().values(), out.heatmap.value(), out.tokens.value()};
}

Prediction forward_model(const Tensor& image, const LandmarkSet& landmarks,
                         const AUCenterTable& table, double sigma, const ModelParams& params,
                         const ModelConfig& cfg) {
  const Tensor mask = au_heatmap(landmarks, table, cfg.grid(), sigma);
  return forward_model(image, mask, params, cfg);
}

// ---- archive ------------------------------------------------------------------

namespace {

constexpr std::uint8_t kDtypeFloat64 = 1;

void put_bytes(std::string& out, std::uint64_t v, int n) {
  for (int i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint64_t uint(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("archive truncated at byte " + std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw FormatError("archive has no tensor named " + name);
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& entry : tensors)
    if (entry.first == name) return true;
  return false;
}

std::string encode_archive(const TensorArchive& archive) {
  std::string out(kArchiveMagic, 8);
  put_bytes(out, kArchiveVersion, 4);
  put_bytes(out, archive.header.size(), 4);
  out += archive.header;
  put_bytes(out, archive.tensors.size(), 4);
  for (const auto& [name, t] : archive.tensors) {
    put_bytes(out, name.size(), 4);
    out += name;
    out.push_back(static_cast<char>(kDtypeFloat64));
    put_bytes(out, t.rank(), 4);
    for (auto d : t.shape()) put_bytes(out, d, 8);
    for (double v : t.data()) put_bytes(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  return out;
}

TensorArchive decode_archive(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(8) != std::string_view(kArchiveMagic, 8)) throw FormatError("not a checkpoint archive");
  const auto version = in.uint(4);
  if (version != kArchiveVersion)
    throw FormatError("unsupported archive version " + std::to_string(version));
  TensorArchive archive;
  archive.header = std::string(in.take(in.uint(4)));
  const auto count = in.uint(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(in.take(in.uint(4)));
    const auto dtype = in.uint(1);
    if (dtype != kDtypeFloat64)
      throw FormatError("tensor " + name + " has unsupported dtype code " + std::to_string(dtype));
    const auto rank = in.uint(4);
    if (rank == 0 || rank > 8) throw FormatError("tensor " + name + " has invalid rank");
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      const auto d = in.uint(8);
      if (d == 0 || d > (1ull << 40) / numel) throw FormatError("tensor " + name + " has invalid dims");
      numel *= d;
      shape.push_back(static_cast<std::size_t>(d));
    }
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (auto& v : data) v = std::bit_cast<double>(in.uint(8));
    archive.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!in.done()) throw FormatError("trailing bytes after archive");
  return archive;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  const std::string bytes = encode_archive(archive);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_archive(ss.str());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  validate(ckpt.params, ckpt.config);
  KeyValueConfig header = ckpt.extra;
  ckpt.config.write_to(header);
  TensorArchive archive;
  archive.header = header.to_text();
  ckpt.params.visit([&](const std::string& name, const Tensor& t) {
    archive.tensors.emplace_back(name, t);
  });
  write_archive(path, archive);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const TensorArchive archive = read_archive(path);
  Checkpoint ckpt;
  ckpt.extra = KeyValueConfig::parse(archive.header);
  ckpt.config = ModelConfig::from_config(ckpt.extra);
  ckpt.params = zero_model(ckpt.config);
  ckpt.params.visit([&](const std::string& name, Tensor& t) {
    const Tensor& stored = archive.get(name);
    if (stored.shape() != t.shape())
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_string(stored.shape()) +
                        ", expected " + shape_string(t.shape()));
    t = stored;
  });
  std::size_t expected = 0;
  ckpt.params.visit([&](const std::string&, const Tensor&) { ++expected; });
  if (archive.tensors.size() != expected)
    throw FormatError("checkpoint holds unexpected tensors");
  return ckpt;
}

}  // namespace autt
