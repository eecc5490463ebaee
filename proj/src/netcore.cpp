#include "diffdet3d/netcore.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace diffdet3d {

// ---------------------------------------------------------------- ParamStore

namespace {
std::atomic<std::uint64_t> g_revision{0};
}  // namespace

void ParamStore::touch() { revision_ = ++g_revision; }

void ParamStore::add(std::string name, Eigen::MatrixXd value) {
  if (contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
  entries_.push_back({std::move(name), std::move(value)});
  touch();
}

bool ParamStore::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

std::size_t ParamStore::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  throw std::out_of_range("ParamStore: no parameter named " + std::string(name));
}

const Eigen::MatrixXd& ParamStore::at(std::string_view name) const {
  return entries_[index_of(name)].value;
}

Eigen::MatrixXd& ParamStore::mutable_at(std::string_view name) {
  touch();
  return entries_[index_of(name)].value;
}

Eigen::Index ParamStore::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

bool ParamStore::same_manifest(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) {
      return false;
    }
  }
  return true;
}

ParamStore ParamStore::zeros_like() const {
  ParamStore out;
  for (const auto& e : entries_) out.add(e.name, Eigen::MatrixXd::Zero(e.value.rows(), e.value.cols()));
  return out;
}

void ParamStore::set_zero() {
  for (auto& e : entries_) e.value.setZero();
  touch();
}

bool ParamStore::all_finite() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const Entry& e) { return e.value.allFinite(); });
}

void ParamStore::axpy(double alpha, const ParamStore& other) {
  if (!same_manifest(other)) throw std::invalid_argument("ParamStore::axpy: manifest mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) entries_[i].value += alpha * other.entries_[i].value;
  touch();
}

void ParamStore::scale(double alpha) {
  for (auto& e : entries_) e.value *= alpha;
  touch();
}

Eigen::VectorXd ParamStore::flatten() const {
  Eigen::VectorXd out(parameter_count());
  Eigen::Index k = 0;
  for (const auto& e : entries_) {
    for (Eigen::Index r = 0; r < e.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < e.value.cols(); ++c) out(k++) = e.value(r, c);
    }
  }
  return out;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (!a.same_manifest(b)) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    if (a.entries_[i].value != b.entries_[i].value) return false;
  }
  return true;
}

// ----------------------------------------------------------------------- MLP

void MlpSpec::init(ParamStore& params, std::mt19937_64& rng) const {
  if (widths.size() < 2) throw std::invalid_argument("MlpSpec: need at least input and output width");
  for (int l = 0; l < layers(); ++l) {
    const int fan_in = widths[l];
    const double bound = std::sqrt(6.0 / fan_in);
    std::uniform_real_distribution<double> dist(-bound, bound);
    Eigen::MatrixXd w(fan_in, widths[l + 1]);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = dist(rng);
    params.add(weight_name(l), std::move(w));
    params.add(bias_name(l), Eigen::MatrixXd::Zero(1, widths[l + 1]));
  }
}

MlpResult mlp_forward(const ParamStore& params, const MlpSpec& spec, const Eigen::MatrixXd& input) {
  if (input.cols() != spec.in_width()) {
    throw std::invalid_argument("mlp_forward(" + spec.prefix + "): input width " +
                                std::to_string(input.cols()) + " != " +
                                std::to_string(spec.in_width()));
  }
  MlpResult result;
  result.tape.revision = params.revision();
  result.tape.owner = &params;
  Eigen::MatrixXd x = input;
  for (int l = 0; l < spec.layers(); ++l) {
    const auto& w = params.at(spec.weight_name(l));
    const auto& b = params.at(spec.bias_name(l));
    if (w.rows() != x.cols() || w.cols() != spec.widths[l + 1]) {
      throw std::invalid_argument("mlp_forward(" + spec.prefix + "): weight shape mismatch");
    }
    Eigen::MatrixXd z = x * w;
    z.rowwise() += b.row(0);
    result.tape.inputs.push_back(std::move(x));
    const bool relu = l + 1 < spec.layers() || spec.relu_output;
    x = relu ? Eigen::MatrixXd(z.cwiseMax(0.0)) : z;
    result.tape.pre.push_back(std::move(z));
  }
  result.output = std::move(x);
  return result;
}

Eigen::MatrixXd mlp_backward(const ParamStore& params, const MlpSpec& spec, const MlpTape& tape,
                             const Eigen::MatrixXd& output_grad, ParamStore& grads) {
  if (tape.owner != &params || tape.revision != params.revision()) {
    throw std::logic_error("mlp_backward(" + spec.prefix + "): stale tape");
  }
  if (static_cast<int>(tape.pre.size()) != spec.layers()) {
    throw std::logic_error("mlp_backward(" + spec.prefix + "): tape/spec layer mismatch");
  }
  const auto& last = tape.pre.back();
  if (output_grad.rows() != last.rows() || output_grad.cols() != last.cols()) {
    throw std::invalid_argument("mlp_backward(" + spec.prefix + "): output_grad shape mismatch");
  }
  Eigen::MatrixXd g = output_grad;
  for (int l = spec.layers() - 1; l >= 0; --l) {
    const bool relu = l + 1 < spec.layers() || spec.relu_output;
    if (relu) g = (tape.pre[l].array() > 0.0).select(g, 0.0);
    grads.mutable_at(spec.weight_name(l)).noalias() += tape.inputs[l].transpose() * g;
    grads.mutable_at(spec.bias_name(l)) += g.colwise().sum();
    g = g * params.at(spec.weight_name(l)).transpose();
  }
  return g;
}

// --------------------------------------------------------------------- AdamW

OptimState OptimState::for_params(const ParamStore& params, const AdamWConfig& config) {
  OptimState s;
  s.config = config;
  s.first_moment = params.zeros_like();
  s.second_moment = params.zeros_like();
  return s;
}

void adamw_step(ParamStore& params, const ParamStore& grads, OptimState& state) {
  if (!params.same_manifest(grads) || !params.same_manifest(state.first_moment) ||
      !params.same_manifest(state.second_moment)) {
    throw std::invalid_argument("adamw_step: manifest mismatch");
  }
  for (const auto& g : grads.entries()) {
    if (!g.value.allFinite()) {
      throw std::runtime_error("adamw_step: non-finite gradient in " + g.name);
    }
  }
  const auto& c = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  auto& p = params.mutable_entries();
  auto& m = state.first_moment.mutable_entries();
  auto& v = state.second_moment.mutable_entries();
  const auto& g = grads.entries();
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i].value *= (1.0 - c.lr * c.weight_decay);
    m[i].value = c.beta1 * m[i].value + (1.0 - c.beta1) * g[i].value;
    v[i].value = c.beta2 * v[i].value + (1.0 - c.beta2) * g[i].value.cwiseAbs2();
    p[i].value.array() -= c.lr * (m[i].value.array() / bc1) /
                          ((v[i].value.array() / bc2).sqrt() + c.eps);
  }
}

void ema_update(ParamStore& teacher, const ParamStore& student, double decay) {
  if (!teacher.same_manifest(student)) throw std::invalid_argument("ema_update: manifest mismatch");
  if (!(decay >= 0.0 && decay <= 1.0)) throw std::invalid_argument("ema_update: decay outside [0,1]");
  auto& t = teacher.mutable_entries();
  const auto& s = student.entries();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (decay == 1.0) continue;
    if (decay == 0.0) {
      t[i].value = s[i].value;
    } else {
      t[i].value = decay * t[i].value + (1.0 - decay) * s[i].value;
    }
  }
}

// ---------------------------------------------------------------- Checkpoint

namespace {

constexpr char kMagic[8] = {'D', 'D', '3', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kDtypeF64 = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw std::runtime_error(std::string("checkpoint truncated while reading ") + what +
                               " at byte offset " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_params(const ParamStore& params) {
  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put<std::uint32_t>(out, kDtypeF64);
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(e.value.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(e.value.cols()));
  }
  for (const auto& e : params.entries()) {
    for (Eigen::Index r = 0; r < e.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < e.value.cols(); ++c) put<double>(out, e.value(r, c));
    }
  }
  return out;
}

ParamStore deserialize_params(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(sizeof(kMagic), "magic") != std::string_view(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = in.get<std::uint32_t>("entry count");
  struct Shape {
    std::string name;
    std::uint64_t rows, cols;
  };
  std::vector<Shape> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.get<std::uint32_t>("name length");
    std::string name(in.take(len, "name"));
    if (in.get<std::uint32_t>("dtype") != kDtypeF64) throw std::runtime_error("checkpoint: unsupported dtype");
    if (in.get<std::uint32_t>("rank") != 2) throw std::runtime_error("checkpoint: unsupported rank");
    const auto rows = in.get<std::uint64_t>("rows");
    const auto cols = in.get<std::uint64_t>("cols");
    manifest.push_back({std::move(name), rows, cols});
  }
  ParamStore out;
  for (const auto& s : manifest) {
    Eigen::MatrixXd m(static_cast<Eigen::Index>(s.rows), static_cast<Eigen::Index>(s.cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = in.get<double>("values");
    }
    out.add(s.name, std::move(m));
  }
  if (in.remaining() != 0) {
    throw std::runtime_error("checkpoint: trailing bytes at offset " + std::to_string(in.pos()));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params) {
  const std::string bytes = serialize_params(params);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write on checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

ParamStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_params(ss.str());
}

}  // namespace diffdet3d
