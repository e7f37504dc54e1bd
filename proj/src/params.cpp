#include "aatn/params.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

namespace aatn {

template <typename T>
BoundParams<T>::BoundParams(Tape<T>& tape, const ParamMap<T>& params, bool trainable) : tape_(&tape) {
  for (const auto& [name, t] : params) {
    vars_.emplace(name, trainable ? tape.variable(t) : tape.constant(t));
  }
}

template <typename T>
Var<T> BoundParams<T>::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
ParamMap<T> BoundParams<T>::grads() const {
  ParamMap<T> out;
  for (const auto& [name, v] : vars_) out.emplace(name, tape_->grad(v));
  return out;
}

template class BoundParams<float>;
template class BoundParams<double>;

Tensor<float> glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  std::uniform_real_distribution<float> dist(-limit, limit);
  Tensor<float> w(Shape{fan_in, fan_out});
  for (auto& v : w.data()) v = dist(rng);
  return w;
}

float AdamState::lr_for(const std::string& name) const {
  for (const auto& [prefix, lr] : lr_overrides) {
    if (name.starts_with(prefix)) return lr;
  }
  return config.lr;
}

void adam_step(ParamMap<float>& params, const ParamMap<float>& grads, AdamState& state) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
  }
  const auto& c = state.config;
  state.step_count += 1;
  const auto t = static_cast<float>(state.step_count);
  const float bc1 = 1.0f - std::pow(c.beta1, t);
  const float bc2 = 1.0f - std::pow(c.beta2, t);
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const auto& g = git->second;
    if (g.shape() != p.shape()) {
      throw DimensionError("gradient shape " + to_string(g.shape()) + " does not match parameter '" + name +
                           "' " + to_string(p.shape()));
    }
    auto& m = state.first_moment.try_emplace(name, p.shape(), 0.0f).first->second;
    auto& v = state.second_moment.try_emplace(name, p.shape(), 0.0f).first->second;
    const float lr = state.lr_for(name);
    auto pd = p.data();
    const auto gd = g.data();
    auto md = m.data();
    auto vd = v.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      md[i] = c.beta1 * md[i] + (1.0f - c.beta1) * gd[i];
      vd[i] = c.beta2 * vd[i] + (1.0f - c.beta2) * gd[i] * gd[i];
      const float m_hat = md[i] / bc1;
      const float v_hat = vd[i] / bc2;
      pd[i] -= lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

double global_norm(const ParamMap<float>& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) {
    for (float v : g.data()) s += static_cast<double>(v) * v;
  }
  return std::sqrt(s);
}

void clip_global_norm(ParamMap<float>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm <= max_norm || norm == 0.0) return;
  const auto factor = static_cast<float>(max_norm / norm);
  for (auto& [name, g] : grads) {
    for (auto& v : g.data()) v *= factor;
  }
}

namespace {

constexpr char kMagic[4] = {'A', 'A', 'T', 'N'};

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("truncated checkpoint: " + path_);
  }
  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamMap<float>& params) {
  std::string buf(kMagic, 4);
  put_u32(buf, kCheckpointVersion);
  for (const auto& [name, t] : params) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_u32(buf, std::bit_cast<std::uint32_t>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

ParamMap<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  Reader r(std::string(std::istreambuf_iterator<char>(in), {}), path.string());
  if (r.str(4) != std::string(kMagic, 4)) throw IoError("not a checkpoint (bad magic): " + path.string());
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
  }
  ParamMap<float> params;
  while (!r.done()) {
    const auto name_len = r.u32();
    std::string name = r.str(name_len);
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<float> data(numel(shape));
    for (auto& v : data) v = std::bit_cast<float>(r.u32());
    params.emplace(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  return params;
}

}  // namespace aatn
