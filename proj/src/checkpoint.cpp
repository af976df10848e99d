#include "triphase/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "triphase/errors.hpp"

namespace triphase::checkpoint {

namespace {

constexpr char kMagic[8] = {'T', 'P', 'H', 'C', 'K', 'P', 'T', '1'};

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
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
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
    if (bytes_.size() - pos_ < n) throw std::runtime_error("checkpoint truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

std::uint64_t config_hash(const model::ModelConfig& cfg) { return fnv1a(cfg.to_json().dump()); }

std::string serialize(const model::ModelConfig& cfg, const nlohmann::json& meta,
                      const std::vector<model::NamedParameter>& params) {
  nlohmann::json full = meta;
  full["model"] = cfg.to_json();
  const std::string meta_text = full.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, config_hash(cfg));
  put<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const auto& m = p.param->value();
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  return out;
}

Archive deserialize(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw std::runtime_error("not a checkpoint file (bad magic)");
  }
  Archive a;
  a.config_hash = r.get<std::uint64_t>();
  const auto meta_len = r.get<std::uint64_t>();
  a.meta = nlohmann::json::parse(r.take(meta_len));
  a.config = model::ModelConfig::from_json(a.meta.at("model"));
  if (config_hash(a.config) != a.config_hash) throw std::runtime_error("checkpoint config hash is inconsistent");
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(r.take(name_len));
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    ag::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    const auto raw = r.take(rows * cols * sizeof(double));
    std::memcpy(m.data(), raw.data(), raw.size());
    a.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (!r.done()) throw std::runtime_error("trailing bytes after checkpoint tensors");
  return a;
}

void restore(const Archive& archive, const std::vector<model::NamedParameter>& params) {
  std::map<std::string, const ag::Matrix*> by_name;
  for (const auto& [name, m] : archive.tensors) by_name.emplace(name, &m);
  if (by_name.size() != params.size()) throw SchemaError("checkpoint tensor count does not match the model");
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw SchemaError("checkpoint lacks tensor " + p.name);
    const auto& src = *it->second;
    if (src.rows() != p.param->value().rows() || src.cols() != p.param->value().cols()) {
      throw SchemaError("checkpoint tensor " + p.name + " has the wrong shape");
    }
    p.param->value() = src;
  }
}

std::string save_file(const std::filesystem::path& path, const model::ModelConfig& cfg, const nlohmann::json& meta,
                      const std::vector<model::NamedParameter>& params) {
  const auto bytes = serialize(cfg, meta, params);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  return hex64(fnv1a(bytes));
}

Archive load_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

Archive load_file(const std::filesystem::path& path, const model::ModelConfig& expected) {
  auto a = load_file(path);
  if (a.config_hash != config_hash(expected)) {
    throw ConfigError("checkpoint " + path.string() + " was saved with a different model config");
  }
  return a;
}

model::Classifier load_classifier(const Archive& archive) {
  model::Rng rng(0);
  model::Classifier c;
  c.encoder = model::EncoderBundle(archive.config, rng);
  bool has_projection = false;
  for (const auto& [name, m] : archive.tensors) has_projection = has_projection || name.rfind("encoder.projection", 0) == 0;
  if (has_projection) c.encoder.attach_projection(rng);
  const auto classes = archive.meta.at("classes").get<std::size_t>();
  c.head = model::ClassifierHead(archive.config.hidden, classes, archive.config.head_activation, rng);
  restore(archive, c.parameters());
  return c;
}

}  // namespace triphase::checkpoint
