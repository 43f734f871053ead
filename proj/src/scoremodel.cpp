#include "exoc/scoremodel.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "exoc/error.hpp"
#include "exoc/kernels.hpp"

namespace exoc {

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::matrix_factorization:
      return "mf";
    case ModelKind::scalar_linear:
      return "linear";
    case ModelKind::scalar_mlp:
      return "mlp";
  }
  return "unknown";
}

void GradBuffer::zero() { std::fill(params.begin(), params.end(), 0.0); }

ScoreModel::ScoreModel(ModelKind kind, std::size_t users, std::size_t items, std::size_t dim,
                       std::vector<std::size_t> hidden, std::size_t n_params)
    : kind_(kind),
      users_(users),
      items_(items),
      dim_(dim),
      hidden_(std::move(hidden)),
      params_(n_params, 0.0) {}

ScoreModel ScoreModel::matrix_factorization(std::size_t users, std::size_t items,
                                            std::size_t dim) {
  if (users == 0 || items == 0 || dim == 0) {
    throw ValidationError("matrix factorization needs positive users, items and dim");
  }
  const std::size_t n = (users + items) * dim + users + items + 1;
  return ScoreModel(ModelKind::matrix_factorization, users, items, dim, {}, n);
}

ScoreModel ScoreModel::scalar_linear() {
  return ScoreModel(ModelKind::scalar_linear, 0, 0, 0, {}, 2);
}

ScoreModel ScoreModel::scalar_mlp(std::vector<std::size_t> hidden) {
  if (hidden.empty()) throw ValidationError("scalar MLP needs at least one hidden layer");
  std::size_t n = 0;
  std::size_t in = 1;
  for (std::size_t h : hidden) {
    if (h == 0) throw ValidationError("scalar MLP hidden widths must be positive");
    n += h * in + h;
    in = h;
  }
  n += in + 1;
  const std::size_t dim = hidden.front();
  return ScoreModel(ModelKind::scalar_mlp, 0, 0, dim, std::move(hidden), n);
}

void ScoreModel::init(RngStream& rng, double scale) {
  std::fill(params_.begin(), params_.end(), 0.0);
  switch (kind_) {
    case ModelKind::matrix_factorization: {
      const std::size_t emb = (users_ + items_) * dim_;
      for (std::size_t i = 0; i < emb; ++i) params_[i] = scale * rng.normal();
      break;
    }
    case ModelKind::scalar_linear:
      params_[0] = scale * rng.normal();
      break;
    case ModelKind::scalar_mlp: {
      std::size_t off = 0;
      std::size_t in = 1;
      auto fill_layer = [&](std::size_t out) {
        // Weights scaled by fan-in keep tanh units out of saturation.
        const double s = std::max(scale, 1.0 / std::sqrt(static_cast<double>(in)));
        for (std::size_t i = 0; i < out * in; ++i) params_[off + i] = s * rng.normal();
        off += out * in + out;
        in = out;
      };
      for (std::size_t h : hidden_) fill_layer(h);
      fill_layer(1);
      break;
    }
  }
}

PairRef ScoreModel::pair_of(const ScoreInput& in) const {
  const auto* p = std::get_if<PairRef>(&in);
  if (p == nullptr) throw ValidationError("matrix factorization model needs a user-item pair");
  if (p->user >= users_ || p->item >= items_) {
    throw ValidationError("pair (" + std::to_string(p->user) + ", " + std::to_string(p->item) +
                          ") outside model bounds");
  }
  return *p;
}

double ScoreModel::feature_of(const ScoreInput& in) const {
  const auto* f = std::get_if<ScalarFeature>(&in);
  if (f == nullptr) {
    throw ValidationError(std::string(model_kind_name(kind_)) + " model needs a scalar feature");
  }
  return f->x;
}

double ScoreModel::mlp_forward(double x, std::vector<std::vector<double>>* acts) const {
  std::vector<double> cur{x};
  if (acts) acts->push_back(cur);
  std::size_t off = 0;
  for (std::size_t h : hidden_) {
    const std::size_t in = cur.size();
    std::vector<double> next(h);
    for (std::size_t o = 0; o < h; ++o) {
      double s = params_[off + h * in + o];
      for (std::size_t i = 0; i < in; ++i) s += params_[off + o * in + i] * cur[i];
      next[o] = std::tanh(s);
    }
    off += h * in + h;
    cur = std::move(next);
    if (acts) acts->push_back(cur);
  }
  double out = params_[off + cur.size()];
  for (std::size_t i = 0; i < cur.size(); ++i) out += params_[off + i] * cur[i];
  return out;
}

double ScoreModel::score(const ScoreInput& in) const {
  switch (kind_) {
    case ModelKind::matrix_factorization: {
      const PairRef p = pair_of(in);
      const std::span<const double> all(params_);
      const auto pu = all.subspan(p.user * dim_, dim_);
      const auto qi = all.subspan((users_ + p.item) * dim_, dim_);
      const std::size_t bias = (users_ + items_) * dim_;
      return kernels::dot(pu, qi) + params_[bias + p.user] + params_[bias + users_ + p.item] +
             params_.back();
    }
    case ModelKind::scalar_linear:
      return params_[0] * feature_of(in) + params_[1];
    case ModelKind::scalar_mlp:
      return mlp_forward(feature_of(in), nullptr);
  }
  return 0.0;
}

void ScoreModel::accumulate_grad(const ScoreInput& in, double upstream, GradBuffer& buf) const {
  if (buf.params.size() != params_.size()) {
    throw ShapeError("gradient buffer does not match model parameter count");
  }
  switch (kind_) {
    case ModelKind::matrix_factorization: {
      const PairRef p = pair_of(in);
      if (upstream == 0.0) return;
      const std::span<const double> all(params_);
      const std::span<double> g(buf.params);
      const std::size_t uoff = p.user * dim_;
      const std::size_t ioff = (users_ + p.item) * dim_;
      kernels::axpy(upstream, all.subspan(ioff, dim_), g.subspan(uoff, dim_));
      kernels::axpy(upstream, all.subspan(uoff, dim_), g.subspan(ioff, dim_));
      const std::size_t bias = (users_ + items_) * dim_;
      g[bias + p.user] += upstream;
      g[bias + users_ + p.item] += upstream;
      g.back() += upstream;
      return;
    }
    case ModelKind::scalar_linear: {
      const double x = feature_of(in);
      buf.params[0] += upstream * x;
      buf.params[1] += upstream;
      return;
    }
    case ModelKind::scalar_mlp: {
      const double x = feature_of(in);
      if (upstream == 0.0) return;
      std::vector<std::vector<double>> acts;
      mlp_forward(x, &acts);
      // Layer offsets, front to back.
      std::vector<std::size_t> offs;
      std::size_t off = 0;
      std::size_t in_w = 1;
      for (std::size_t h : hidden_) {
        offs.push_back(off);
        off += h * in_w + h;
        in_w = h;
      }
      offs.push_back(off);
      // Output layer.
      const std::vector<double>& last = acts.back();
      std::vector<double> delta(last.size());
      for (std::size_t i = 0; i < last.size(); ++i) {
        buf.params[off + i] += upstream * last[i];
        delta[i] = upstream * params_[off + i];
      }
      buf.params[off + last.size()] += upstream;
      // Hidden layers, back to front. delta holds dL/d(activation).
      for (std::size_t l = hidden_.size(); l-- > 0;) {
        const std::vector<double>& a_out = acts[l + 1];
        const std::vector<double>& a_in = acts[l];
        const std::size_t h = hidden_[l];
        const std::size_t in = a_in.size();
        const std::size_t loff = offs[l];
        std::vector<double> prev(in, 0.0);
        for (std::size_t o = 0; o < h; ++o) {
          const double pre = delta[o] * (1.0 - a_out[o] * a_out[o]);
          for (std::size_t i = 0; i < in; ++i) {
            buf.params[loff + o * in + i] += pre * a_in[i];
            prev[i] += pre * params_[loff + o * in + i];
          }
          buf.params[loff + h * in + o] += pre;
        }
        delta = std::move(prev);
      }
      return;
    }
  }
}

// tanh rounds to exactly +-1 for |raw| > 19; keep rho strictly inside.
double CorrelationParam::value() const { return std::clamp(std::tanh(raw), -kMaxAbsRho, kMaxAbsRho); }

double CorrelationParam::jacobian() const {
  const double v = value();
  return 1.0 - v * v;
}

CorrelationParam CorrelationParam::from_value(double rho) {
  if (!(std::fabs(rho) < 1.0)) throw ValidationError("correlation must lie in (-1, 1)");
  return {std::atanh(rho)};
}

void check_model_shape(const ScoreModel& model, std::size_t users, std::size_t items) {
  if (model.kind() != ModelKind::matrix_factorization) return;
  if (model.users() != users || model.items() != items) {
    throw ShapeError("model was built for " + std::to_string(model.users()) + "x" +
                     std::to_string(model.items()) + " but the dataset is " +
                     std::to_string(users) + "x" + std::to_string(items));
  }
}

namespace {

constexpr std::array<char, 4> kMagic{'E', 'X', 'O', 'C'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> raw{};
    std::memcpy(raw.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    bytes_.insert(bytes_.end(), raw.begin(), raw.end());
  }
  void put_bytes(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw FormatError("checkpoint truncated");
    std::array<unsigned char, sizeof(T)> raw{};
    std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

void write_model(Writer& w, const ScoreModel& m) {
  w.put<std::uint8_t>(static_cast<std::uint8_t>(m.kind()));
  w.put<std::uint64_t>(m.users());
  w.put<std::uint64_t>(m.items());
  w.put<std::uint64_t>(m.dim());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.hidden().size()));
  for (std::size_t h : m.hidden()) w.put<std::uint64_t>(h);
  w.put<std::uint64_t>(m.num_params());
  for (double v : m.params()) w.put<double>(v);
}

ScoreModel read_model(Reader& r) {
  const auto kind = r.get<std::uint8_t>();
  const auto users = r.get<std::uint64_t>();
  const auto items = r.get<std::uint64_t>();
  const auto dim = r.get<std::uint64_t>();
  const auto n_hidden = r.get<std::uint32_t>();
  if (n_hidden > 64) throw FormatError("checkpoint declares an implausible layer count");
  std::vector<std::size_t> hidden;
  for (std::uint32_t i = 0; i < n_hidden; ++i) hidden.push_back(r.get<std::uint64_t>());
  ScoreModel m = [&] {
    switch (static_cast<ModelKind>(kind)) {
      case ModelKind::matrix_factorization:
        return ScoreModel::matrix_factorization(users, items, dim);
      case ModelKind::scalar_linear:
        return ScoreModel::scalar_linear();
      case ModelKind::scalar_mlp:
        return ScoreModel::scalar_mlp(hidden);
    }
    throw FormatError("checkpoint has unknown model kind " + std::to_string(kind));
  }();
  const auto n = r.get<std::uint64_t>();
  if (n != m.num_params()) throw ShapeError("checkpoint parameter count disagrees with its shape");
  for (double& v : m.params()) v = r.get<double>();
  return m;
}

std::uint32_t crc_of(std::span<const unsigned char> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

}  // namespace

void save_checkpoint(const ScoreModel& model_o, const ScoreModel& model_r,
                     const CorrelationParam& corr, const std::filesystem::path& path) {
  Writer w;
  w.put_bytes(kMagic.data(), kMagic.size());
  w.put<std::uint16_t>(kCheckpointVersion);
  write_model(w, model_o);
  write_model(w, model_r);
  w.put<double>(corr.raw);
  w.put<std::uint32_t>(crc_of(w.bytes()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(w.bytes().data()),
            static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw Error("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
  if (bytes.size() < kMagic.size() + 2 + 4 ||
      !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw FormatError("not a checkpoint file (bad magic): " + path.string());
  }
  const std::span<const unsigned char> all(bytes);
  Reader tail(all.subspan(bytes.size() - 4));
  if (tail.get<std::uint32_t>() != crc_of(all.first(bytes.size() - 4))) {
    throw FormatError("checkpoint CRC mismatch: " + path.string());
  }
  Reader r(all.first(bytes.size() - 4));
  for (std::size_t i = 0; i < kMagic.size(); ++i) r.get<char>();
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  ScoreModel model_o = read_model(r);
  ScoreModel model_r = read_model(r);
  CorrelationParam corr{r.get<double>()};
  if (r.pos() != bytes.size() - 4) throw FormatError("trailing bytes in checkpoint");
  return {std::move(model_o), std::move(model_r), corr};
}

}  // namespace exoc
