#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fcvae/config_io.hpp"
#include "fcvae/training.hpp"

namespace fcvae {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// Layout, all integers little-endian:
//   magic "FCVAECKP" | u32 version | u64 len + config JSON | u64 step
//   u64 n_tensors, each: u32 name_len, name, u32 rank, u64 dims[rank], f64 data
//   u64 adam_t | u64 n_moments, each: u32 name_len, name, u64 n, f64 m[n], f64 v[n]
//   u64 len + sample rng state (text form of mt19937_64)
//   u32 CRC-32 over every preceding byte
inline constexpr char kCheckpointMagic[8] = {'F', 'C', 'V', 'A', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct NamedMoments {
  std::string name;
  std::vector<double> m, v;
};

struct Checkpoint {
  TrainConfig config;
  Vocabulary vocab;
  std::uint64_t step = 0;
  std::vector<NamedTensor> tensors;
  std::uint64_t adam_t = 0;
  std::vector<NamedMoments> moments;
  std::string rng_state;
};

// Config JSON stored in the file: the train config plus the vocabulary.
inline std::string checkpoint_config_json(const TrainConfig& cfg, const Vocabulary& vocab) {
  nlohmann::json j = to_json(cfg);
  j["vocab"] = vocab.tokens();
  return j.dump();
}

namespace detail {
class Writer {
 public:
  template <class T>
  void pod(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }
  void bytes(const std::string& s) { buf_.append(s); }
  void doubles(std::span<const double> d) { buf_.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double)); }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& data, std::size_t end) : data_(data), end_(end) {}
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> doubles(std::uint64_t n) {
    if (n > (end_ - pos_) / sizeof(double)) throw IntegrityError("checkpoint truncated");
    std::vector<double> d(n);
    std::memcpy(d.data(), data_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return d;
  }
  bool at_end() const { return pos_ == end_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) throw IntegrityError("checkpoint truncated");
  }
  const std::string& data_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}
}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  detail::Writer w;
  w.bytes(std::string(kCheckpointMagic, sizeof kCheckpointMagic));
  w.pod<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = checkpoint_config_json(c.config, c.vocab);
  w.pod<std::uint64_t>(cfg.size());
  w.bytes(cfg);
  w.pod<std::uint64_t>(c.step);
  w.pod<std::uint64_t>(c.tensors.size());
  for (const auto& t : c.tensors) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.tensor.shape().size()));
    for (std::size_t d : t.tensor.shape()) w.pod<std::uint64_t>(d);
    w.doubles(t.tensor.data());
  }
  w.pod<std::uint64_t>(c.adam_t);
  w.pod<std::uint64_t>(c.moments.size());
  for (const auto& m : c.moments) {
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(m.name.size()));
    w.bytes(m.name);
    w.pod<std::uint64_t>(m.m.size());
    w.doubles(m.m);
    w.doubles(m.v);
  }
  w.pod<std::uint64_t>(c.rng_state.size());
  w.bytes(c.rng_state);
  const std::uint32_t crc = detail::crc32_of(w.buffer().data(), w.buffer().size());
  w.pod<std::uint32_t>(crc);
  return std::move(w.buffer());
}

inline Checkpoint deserialize_checkpoint(const std::string& data) {
  if (data.size() < sizeof kCheckpointMagic + 8) throw IntegrityError("checkpoint truncated");
  if (std::memcmp(data.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw IntegrityError("not a checkpoint file (bad magic)");
  const std::size_t body = data.size() - sizeof(std::uint32_t);
  detail::Reader r(data, body);
  r.bytes(sizeof kCheckpointMagic);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  std::uint32_t stored;
  std::memcpy(&stored, data.data() + body, sizeof stored);
  if (stored != detail::crc32_of(data.data(), body)) throw IntegrityError("checkpoint checksum mismatch");

  Checkpoint c;
  const std::string cfg = r.bytes(r.pod<std::uint64_t>());
  try {
    nlohmann::json j = nlohmann::json::parse(cfg);
    c.vocab = Vocabulary(j.at("vocab").get<std::vector<std::string>>());
    j.erase("vocab");
    c.config = train_config_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(std::string("checkpoint config unreadable: ") + e.what());
  }
  c.step = r.pod<std::uint64_t>();
  const auto n_tensors = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_tensors; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.pod<std::uint32_t>());
    const auto rank = r.pod<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.pod<std::uint64_t>());
    t.tensor = Tensor(shape, r.doubles(shape_numel(shape)));
    c.tensors.push_back(std::move(t));
  }
  c.adam_t = r.pod<std::uint64_t>();
  const auto n_moments = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n_moments; ++i) {
    NamedMoments m;
    m.name = r.bytes(r.pod<std::uint32_t>());
    const auto n = r.pod<std::uint64_t>();
    m.m = r.doubles(n);
    m.v = r.doubles(n);
    c.moments.push_back(std::move(m));
  }
  c.rng_state = r.bytes(r.pod<std::uint64_t>());
  if (!r.at_end()) throw IntegrityError("trailing bytes in checkpoint");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string bytes = serialize_checkpoint(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed writing checkpoint " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into place at " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read checkpoint " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(data);
}

inline Checkpoint make_checkpoint(const Trainer& t) {
  Checkpoint c;
  c.config = t.cfg_;
  c.vocab = t.vocab_;
  c.step = t.step_;
  const auto params = t.model_->params().all();
  for (const Parameter* p : params) c.tensors.push_back({p->name, p->tensor});
  c.adam_t = t.adam_.steps();
  for (std::size_t k = 0; k < params.size(); ++k)
    c.moments.push_back({params[k]->name, t.adam_.first_moments()[k], t.adam_.second_moments()[k]});
  std::ostringstream rng;
  rng << t.sample_rng_;
  c.rng_state = rng.str();
  return c;
}

// Copies checkpoint tensors into a freshly built model, requiring an exact
// match of names and shapes.
inline void load_parameters(Model& model, const std::vector<NamedTensor>& tensors) {
  auto params = model.params().all();
  if (params.size() != tensors.size())
    throw CompatibilityError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                             std::to_string(params.size()));
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k]->name != tensors[k].name)
      throw CompatibilityError("checkpoint tensor '" + tensors[k].name + "' where '" + params[k]->name + "' was expected");
    if (params[k]->tensor.shape() != tensors[k].tensor.shape())
      throw CompatibilityError("checkpoint tensor '" + tensors[k].name + "' has shape " +
                               shape_str(tensors[k].tensor.shape()) + ", model expects " +
                               shape_str(params[k]->tensor.shape()));
    params[k]->tensor.storage() = tensors[k].tensor.storage();
  }
}

inline std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& c) {
  auto model = std::make_unique<Model>(c.config.model, derive_seed(c.config.seed, kInitStream));
  load_parameters(*model, c.tensors);
  return model;
}

inline Trainer resume_trainer(const Checkpoint& c, std::vector<PostResponsePair> pairs) {
  if (c.config.model.vocab_size != c.vocab.size())
    throw IntegrityError("checkpoint vocab_size " + std::to_string(c.config.model.vocab_size) + " but " +
                         std::to_string(c.vocab.size()) + " vocabulary entries");
  Trainer t(Trainer::ResumeTag{}, c.config, c.vocab, std::move(pairs));
  load_parameters(*t.model_, c.tensors);
  std::vector<std::vector<double>> m, v;
  const auto params = t.model_->params().all();
  if (c.moments.size() != params.size()) throw IntegrityError("optimizer state does not match the model");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (c.moments[k].name != params[k]->name)
      throw IntegrityError("optimizer state for '" + c.moments[k].name + "' where '" + params[k]->name + "' was expected");
    m.push_back(c.moments[k].m);
    v.push_back(c.moments[k].v);
  }
  t.adam_.restore(c.adam_t, std::move(m), std::move(v));
  std::istringstream rng(c.rng_state);
  rng >> t.sample_rng_;
  if (!rng) throw IntegrityError("checkpoint rng state unreadable");
  t.step_ = c.step;
  return t;
}

struct TrainRunOptions {
  std::string log_path;         // CSV loss log; appended to when resuming
  std::string checkpoint_path;  // written every checkpoint_interval steps and at the end
  std::function<void(const LogRow&)> on_step;
};

// Runs the trainer up to config().total_steps. A non-finite loss propagates
// as NonFiniteLossError; the last checkpoint written stays on disk.
inline void run_training(Trainer& t, const TrainRunOptions& o) {
  std::ofstream log;
  if (!o.log_path.empty()) {
    const bool fresh = t.step_count() == 0;
    log.open(o.log_path, std::ios::binary | (fresh ? std::ios::trunc : std::ios::app));
    if (!log) throw Error("cannot write loss log " + o.log_path);
    if (fresh) log << kLossLogHeader << '\n';
  }
  const std::size_t interval = t.config().checkpoint_interval;
  while (t.step_count() < t.config().total_steps) {
    const LogRow row = t.step();
    if (log.is_open()) {
      log << format_log_row(row) << '\n';
      log.flush();
    }
    if (o.on_step) o.on_step(row);
    if (!o.checkpoint_path.empty() && interval > 0 && row.step % interval == 0)
      save_checkpoint(make_checkpoint(t), o.checkpoint_path);
  }
  if (!o.checkpoint_path.empty()) save_checkpoint(make_checkpoint(t), o.checkpoint_path);
}

}  // namespace fcvae
