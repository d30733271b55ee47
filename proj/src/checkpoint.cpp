#include "subflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "subflow/errors.hpp"

namespace subflow {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O writes host-order values and assumes little-endian");

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& p) : out_(p, std::ios::binary | std::ios::trunc) {
    if (!out_) {
      throw std::runtime_error("cannot open " + p.string() + " for writing");
    }
  }
  template <class T>
  void put(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void finish(const std::filesystem::path& p) {
    out_.flush();
    if (!out_) {
      throw std::runtime_error("write to " + p.string() + " failed");
    }
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& p) : in_(p, std::ios::binary), path_(p.string()) {
    if (!in_) {
      throw ContractError("cannot open checkpoint " + path_);
    }
  }
  template <class T>
  T get() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw ContractError("checkpoint " + path_ + " is truncated");
    }
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  std::ifstream in_;
  std::string path_;
};

}  // namespace

nlohmann::json policy_config_to_json(const PolicyConfig& cfg) {
  return {{"backward", cfg.backward == BackwardMode::kLearned ? "learned" : "uniform"},
          {"hidden", cfg.hidden},
          {"depth", cfg.depth},
          {"use_logz", cfg.use_logz},
          {"activation", to_string(cfg.activation)},
          {"value_head", cfg.value_head},
          {"backward_value_head", cfg.backward_value_head},
          {"flow_head", cfg.flow_head}};
}

PolicyConfig policy_config_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.backward = j.at("backward").get<std::string>() == "learned" ? BackwardMode::kLearned : BackwardMode::kUniform;
  c.hidden = j.at("hidden").get<int>();
  c.depth = j.at("depth").get<int>();
  c.use_logz = j.at("use_logz").get<bool>();
  c.activation = parse_activation(j.at("activation").get<std::string>());
  c.value_head = j.at("value_head").get<bool>();
  c.backward_value_head = j.at("backward_value_head").get<bool>();
  c.flow_head = j.at("flow_head").get<bool>();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const PolicyBundle& bundle) {
  nlohmann::json header = meta;
  header["policy"] = policy_config_to_json(bundle.config);
  const std::string text = header.dump();
  Writer w(path);
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(text.size()));
  w.bytes(text.data(), text.size());
  for (int h = 0; h < kHeadCount; ++h) {
    const auto id = static_cast<HeadId>(h);
    if (id == HeadId::kLogZ) {
      w.put(static_cast<std::uint8_t>(bundle.has(id)));
      w.put(bundle.log_z);
      continue;
    }
    w.put(static_cast<std::uint8_t>(bundle.has(id)));
    if (!bundle.has(id)) {
      continue;
    }
    const Approximator& net = bundle.net(id);
    w.put(static_cast<std::uint32_t>(net.widths().size()));
    for (int width : net.widths()) {
      w.put(static_cast<std::uint32_t>(width));
    }
    w.put(static_cast<std::uint32_t>(net.activation()));
    w.put(net.leaky_slope());
    w.put(static_cast<std::uint64_t>(net.size()));
    w.bytes(net.parameters().data(), net.size() * sizeof(double));
  }
  w.finish(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw ContractError(r.path() + " is not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ContractError(r.path() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = r.get<std::uint32_t>();
  std::string text(len, '\0');
  r.bytes(text.data(), len);
  Checkpoint ck;
  try {
    ck.meta = nlohmann::json::parse(text);
    ck.bundle.config = policy_config_from_json(ck.meta.at("policy"));
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(r.path() + ": corrupt header: " + e.what());
  }
  for (int h = 0; h < kHeadCount; ++h) {
    const auto id = static_cast<HeadId>(h);
    const bool present = r.get<std::uint8_t>() != 0;
    if (id == HeadId::kLogZ) {
      ck.bundle.log_z = r.get<double>();
      if (present != ck.bundle.config.use_logz) {
        throw ContractError(r.path() + ": log Z flag disagrees with the header");
      }
      continue;
    }
    if (!present) {
      if (id == HeadId::kForward) {
        throw ContractError(r.path() + ": forward policy missing");
      }
      continue;
    }
    const auto layers = r.get<std::uint32_t>();
    if (layers < 2 || layers > 64) {
      throw ContractError(r.path() + ": implausible layer count");
    }
    std::vector<int> widths;
    for (std::uint32_t l = 0; l < layers; ++l) {
      widths.push_back(static_cast<int>(r.get<std::uint32_t>()));
    }
    const auto act = r.get<std::uint32_t>();
    if (act > static_cast<std::uint32_t>(Activation::kIdentity)) {
      throw ContractError(r.path() + ": unknown activation code");
    }
    const auto slope = r.get<double>();
    Approximator net(widths, static_cast<Activation>(act), slope);
    const auto count = r.get<std::uint64_t>();
    if (count != net.size()) {
      throw ContractError(r.path() + ": parameter count does not match layer widths");
    }
    r.bytes(net.parameters().data(), count * sizeof(double));
    switch (id) {
      case HeadId::kForward:
        ck.bundle.forward = std::move(net);
        break;
      case HeadId::kBackward:
        ck.bundle.backward = std::move(net);
        break;
      case HeadId::kValue:
        ck.bundle.value = std::move(net);
        break;
      case HeadId::kBackwardValue:
        ck.bundle.backward_value = std::move(net);
        break;
      case HeadId::kFlow:
        ck.bundle.flow = std::move(net);
        break;
      case HeadId::kLogZ:
        break;
    }
  }
  if (!r.at_end()) {
    throw ContractError(r.path() + ": trailing bytes after the last head");
  }
  return ck;
}

}  // namespace subflow
