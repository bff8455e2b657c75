#include "noisemap/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "noisemap/rng.hpp"

namespace noisemap {

namespace {

bool divisible(const Dims& d, std::size_t by) {
  return d.d % by == 0 && d.h % by == 0 && d.w % by == 0;
}

std::string dims_key(const Dims& d) { return d.str(); }

Tensorf he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<float>(dist(rng));
  return Tensorf(std::move(shape), std::move(values));
}

void add_conv(ModelParams& p, const std::string& name, std::size_t cin, std::size_t cout,
              std::size_t k, Rng& rng) {
  p.tensors.push_back({name + ".w", he_normal({cout, cin, k, k, k}, cin * k * k * k, rng)});
  p.tensors.push_back({name + ".b", Tensorf::zeros({cout})});
}

void add_zero_conv(ModelParams& p, const std::string& name, std::size_t cin, std::size_t cout,
                   std::size_t k) {
  p.tensors.push_back({name + ".w", Tensorf::zeros({cout, cin, k, k, k})});
  p.tensors.push_back({name + ".b", Tensorf::zeros({cout})});
}

Tensorf conv(const ModelParams& p, const std::string& name, const Tensorf& x, std::size_t pad) {
  return conv3d(x, p.get(name + ".w"), p.get(name + ".b"), 1, pad);
}

void check_batch(const Tensorf& batch, const Dims& expected, std::size_t channels,
                 const char* who) {
  const Shape& s = batch.shape();
  if (s.size() != 5 || s[1] != channels || s[2] != expected.d || s[3] != expected.h ||
      s[4] != expected.w) {
    throw ShapeError(std::string(who) + ": batch shape " + shape_string(s) + " does not match [N," +
                     std::to_string(channels) + "," + std::to_string(expected.d) + "," +
                     std::to_string(expected.h) + "," + std::to_string(expected.w) + "]");
  }
}

std::size_t predictor_width(const PredictorSpec& s, std::size_t block) {
  return block >= s.n_res_blocks / 2 && s.n_res_blocks > 1 ? 2 * s.base_channels
                                                            : s.base_channels;
}

void append_digest_input(std::string& buf, const NamedTensor& t) {
  buf += t.name;
  buf.push_back('\0');
  buf += shape_string(t.value.shape());
  const auto d = t.value.data();
  buf.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(float));
}

// little-endian helpers
void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

class Reader {
 public:
  Reader(std::vector<std::uint8_t> bytes, std::filesystem::path path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw ParamFileError(path_, pos_,
                           std::string("truncated while reading ") + what + " (need " +
                               std::to_string(n) + " bytes, " +
                               std::to_string(bytes_.size() - pos_) + " left)");
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint16_t u16(const char* what) {
    const auto* p = take(2, what);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    const auto* p = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'N', 'M', 'A', 'P'};
constexpr std::uint16_t kFormatVersion = 1;

}  // namespace

// ---- specs -------------------------------------------------------------------

void PredictorSpec::validate() const {
  if (in_channels < 1) throw ModelError("predictor: in_channels must be >= 1");
  if (base_channels < 1) throw ModelError("predictor: base_channels must be >= 1");
  if (n_res_blocks < 1) throw ModelError("predictor: n_res_blocks must be >= 1");
  if (input_shape.d < 16 || input_shape.h < 16 || input_shape.w < 16) {
    throw ModelError("predictor: every input dim must be >= 16, got " + input_shape.str());
  }
  if (!divisible(input_shape, std::size_t{1} << n_downsamples())) {
    throw ModelError("predictor: input shape " + input_shape.str() + " is not divisible by " +
                     std::to_string(1u << n_downsamples()));
  }
}

std::string PredictorSpec::canonical() const {
  std::ostringstream os;
  os << "predictor/v1;in=" << in_channels << ";base=" << base_channels
     << ";blocks=" << n_res_blocks << ";shape=" << dims_key(input_shape);
  return os.str();
}

Digest PredictorSpec::fingerprint() const { return sha256(canonical()); }

void NoiseModelSpec::validate() const {
  if (n_blocks < 1) throw ModelError("noise model: n_blocks must be >= 1");
  if (first_channels < 1) throw ModelError("noise model: first_channels must be >= 1");
  if (input_shape.voxels() == 0 || !divisible(input_shape, std::size_t{1} << n_blocks)) {
    throw ModelError("noise model: input shape " + input_shape.str() + " is not divisible by " +
                     std::to_string(std::size_t{1} << n_blocks));
  }
}

std::string NoiseModelSpec::canonical() const {
  std::ostringstream os;
  os << "noise-model/v1;blocks=" << n_blocks << ";first=" << first_channels
     << ";shape=" << dims_key(input_shape) << ";skips=" << (skip_connections ? 1 : 0);
  return os.str();
}

Digest NoiseModelSpec::fingerprint() const { return sha256(canonical()); }

Digest fingerprint_of(const ArchSpec& spec) {
  return std::visit([](const auto& s) { return s.fingerprint(); }, spec);
}

Dims input_shape_of(const ArchSpec& spec) {
  return std::visit([](const auto& s) { return s.input_shape; }, spec);
}

// ---- errors ------------------------------------------------------------------

FingerprintError::FingerprintError(const Digest& expected, const Digest& found)
    : ModelError("parameter fingerprint mismatch: expected " + to_hex(expected) + ", file has " +
                 to_hex(found)),
      expected_(expected),
      found_(found) {}

ParamFileError::ParamFileError(const std::filesystem::path& path, std::uint64_t offset,
                               const std::string& why)
    : ModelError("corrupt parameter file " + path.string() + " at byte " +
                 std::to_string(offset) + ": " + why),
      offset_(offset) {}

// ---- ModelParams -----------------------------------------------------------

const Tensorf& ModelParams::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw ModelError("model has no tensor named '" + name + "'");
}

Tensorf& ModelParams::get(const std::string& name) {
  return const_cast<Tensorf&>(static_cast<const ModelParams&>(*this).get(name));
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.value.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.spec = spec;
  out.fingerprint = fingerprint;
  out.rng_seed = rng_seed;
  out.tensors.reserve(tensors.size());
  for (const auto& t : tensors) {
    Tensorf copy = t.value.detach();
    copy.set_requires_grad(t.value.requires_grad());
    out.tensors.push_back({t.name, std::move(copy)});
  }
  return out;
}

void ModelParams::set_trainable(bool on) {
  for (auto& t : tensors) t.value.set_requires_grad(on);
}

std::vector<Tensorf> ModelParams::trainable() const {
  std::vector<Tensorf> out;
  for (const auto& t : tensors) {
    if (t.value.requires_grad()) out.push_back(t.value);
  }
  return out;
}

// ---- init --------------------------------------------------------------------

ModelParams init_predictor(const PredictorSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams p;
  p.spec = spec;
  p.fingerprint = spec.fingerprint();
  p.rng_seed = seed;
  Rng rng(derive_seed(seed, {0x7072656400ULL}));
  add_conv(p, "stem", spec.in_channels, spec.base_channels, 3, rng);
  std::size_t width = spec.base_channels;
  for (std::size_t b = 0; b < spec.n_res_blocks; ++b) {
    const std::string name = "block" + std::to_string(b);
    const std::size_t w = predictor_width(spec, b);
    if (w != width) {
      add_conv(p, name + ".expand", width, w, 3, rng);
      width = w;
    }
    add_conv(p, name + ".conv1", width, width, 3, rng);
    add_conv(p, name + ".conv2", width, width, 3, rng);
  }
  p.tensors.push_back({"head.w", he_normal({1, width}, width, rng)});
  p.tensors.push_back({"head.b", Tensorf::zeros({1})});
  return p;
}

ModelParams init_noise_model(const NoiseModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams p;
  p.spec = spec;
  p.fingerprint = spec.fingerprint();
  p.rng_seed = seed;
  Rng rng(derive_seed(seed, {0x6e6f69736500ULL}));
  const std::size_t c = spec.first_channels;
  const std::size_t L = spec.n_blocks;
  auto width = [c](std::size_t level) { return c << level; };
  std::size_t in = 1;
  for (std::size_t l = 0; l < L; ++l) {
    add_conv(p, "enc" + std::to_string(l), in, width(l), 3, rng);
    in = width(l);
  }
  add_conv(p, "mid", in, width(L), 3, rng);
  for (std::size_t l = L; l-- > 0;) {
    const std::size_t cin = width(l + 1) + (spec.skip_connections ? width(l) : 0);
    add_conv(p, "dec" + std::to_string(l), cin, width(l), 3, rng);
  }
  add_zero_conv(p, "head", width(0), 1, 1);
  return p;
}

ModelParams transfer_trunk(const ModelParams& pretrained) {
  if (!pretrained.is_noise_model()) {
    throw ModelError("transfer_trunk: source is not a noise model");
  }
  ModelParams out = pretrained.clone();
  for (auto& t : out.tensors) {
    if (t.name.rfind(kHeadPrefix, 0) == 0) {
      t.value = Tensorf::zeros(t.value.shape(), t.value.requires_grad());
    }
  }
  return out;
}

Digest trunk_digest(const ModelParams& params) {
  std::string buf;
  for (const auto& t : params.tensors) {
    if (t.name.rfind(kHeadPrefix, 0) == 0) continue;
    append_digest_input(buf, t);
  }
  return sha256(buf);
}

Digest params_digest(const ModelParams& params) {
  std::string buf;
  for (const auto& t : params.tensors) append_digest_input(buf, t);
  return sha256(buf);
}

// ---- forward -----------------------------------------------------------------

Tensorf make_batch(const std::vector<const Volume*>& volumes) {
  if (volumes.empty()) throw ShapeError("make_batch: no volumes");
  const Dims dims = volumes.front()->dims;
  std::vector<float> data;
  data.reserve(volumes.size() * dims.voxels());
  for (const Volume* v : volumes) {
    if (!(v->dims == dims)) {
      throw ShapeError("make_batch: volume " + v->dims.str() + " differs from " + dims.str());
    }
    data.insert(data.end(), v->data.begin(), v->data.end());
  }
  return Tensorf({volumes.size(), 1, dims.d, dims.h, dims.w}, std::move(data));
}

Tensorf predict_age(const ModelParams& params, const Tensorf& batch) {
  const auto* spec = std::get_if<PredictorSpec>(&params.spec);
  if (!spec) throw ModelError("predict_age: parameters are not a predictor");
  check_batch(batch, spec->input_shape, spec->in_channels, "predict_age");

  Tensorf h = pool_avg3d(batch, 2);
  h = relu(conv(params, "stem", h, 1));
  h = pool_avg3d(h, 2);
  for (std::size_t b = 0; b < spec->n_res_blocks; ++b) {
    const std::string name = "block" + std::to_string(b);
    if (b > 0 && predictor_width(*spec, b) != predictor_width(*spec, b - 1)) {
      h = relu(conv(params, name + ".expand", h, 1));
    }
    Tensorf r = relu(conv(params, name + ".conv1", h, 1));
    r = conv(params, name + ".conv2", r, 1);
    h = relu(add(h, r));
    if (b == 0) h = pool_avg3d(h, 2);
  }
  Tensorf features = global_avg_pool3d(h);
  Tensorf out = linear(features, params.get("head.w"), params.get("head.b"));
  return reshape(out, Shape{batch.dim(0)});
}

Tensorf noise_model_logits(const ModelParams& params, const Tensorf& batch) {
  const auto* spec = std::get_if<NoiseModelSpec>(&params.spec);
  if (!spec) throw ModelError("noise model forward: parameters are not a noise model");
  check_batch(batch, spec->input_shape, 1, "noise model forward");

  std::vector<Tensorf> skips;
  Tensorf h = batch;
  for (std::size_t l = 0; l < spec->n_blocks; ++l) {
    h = relu(conv(params, "enc" + std::to_string(l), h, 1));
    skips.push_back(h);
    h = pool_avg3d(h, 2);
  }
  h = relu(conv(params, "mid", h, 1));
  for (std::size_t l = spec->n_blocks; l-- > 0;) {
    h = upsample_nearest3d(h, 2);
    if (spec->skip_connections) h = concat_channels(h, skips[l]);
    h = relu(conv(params, "dec" + std::to_string(l), h, 1));
  }
  return conv(params, "head", h, 0);
}

Tensorf reconstruct(const ModelParams& params, const Tensorf& batch) {
  return noise_model_logits(params, batch);
}

Tensorf noise_mask(const ModelParams& params, const Tensorf& batch) {
  return clamp(sigmoid(noise_model_logits(params, batch)), kMaskEpsilon, 1.0f - kMaskEpsilon);
}

// ---- serialization -----------------------------------------------------------

void save_params(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ModelError("save_params: cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  put_u16(os, kFormatVersion);
  os.write(reinterpret_cast<const char*>(params.fingerprint.data()), 32);
  put_u32(os, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& t : params.tensors) {
    put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    const Shape& s = t.value.shape();
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    for (auto d : s) put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.value.data()) put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (!os) throw ModelError("save_params: write failed for " + path.string());
}

ModelParams load_params(const std::filesystem::path& path, const ArchSpec& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelError("load_params: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path);

  const auto* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw ParamFileError(path, 0, "bad magic bytes");
  const std::uint16_t version = r.u16("format version");
  if (version != kFormatVersion) {
    throw ParamFileError(path, 4, "unsupported format version " + std::to_string(version));
  }
  Digest found{};
  std::memcpy(found.data(), r.take(32, "fingerprint"), 32);
  const Digest want = fingerprint_of(expected);
  if (found != want) throw FingerprintError(want, found);

  ModelParams p;
  p.spec = expected;
  p.fingerprint = found;
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("name length");
    const auto* name_bytes = r.take(name_len, "tensor name");
    std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw ParamFileError(path, r.pos() - 4, "implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("dimension");
    const std::size_t n = shape_numel(shape);
    if (n * 4 > r.remaining()) {
      throw ParamFileError(path, r.pos(),
                           "truncated while reading data of tensor '" + name + "'");
    }
    std::vector<float> values(n);
    for (auto& v : values) v = std::bit_cast<float>(r.u32("tensor data"));
    try {
      p.tensors.push_back({std::move(name), Tensorf(std::move(shape), std::move(values))});
    } catch (const NonFiniteError&) {
      throw ParamFileError(path, r.pos(), "non-finite parameter value");
    }
  }
  if (r.remaining() != 0) {
    throw ParamFileError(path, r.pos(), std::to_string(r.remaining()) + " trailing bytes");
  }

  // The tensor layout must match what the spec builds.
  const ModelParams reference =
      std::visit([](const auto& s) -> ModelParams {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, PredictorSpec>) return init_predictor(s, 0);
        else return init_noise_model(s, 0);
      }, expected);
  if (reference.tensors.size() != p.tensors.size()) {
    throw ParamFileError(path, r.pos(), "tensor count does not match the architecture");
  }
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (reference.tensors[i].name != p.tensors[i].name ||
        reference.tensors[i].value.shape() != p.tensors[i].value.shape()) {
      throw ParamFileError(path, r.pos(), "tensor '" + p.tensors[i].name +
                                              "' does not match the architecture");
    }
  }
  return p;
}

}  // namespace noisemap
