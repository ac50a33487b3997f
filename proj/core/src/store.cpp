#include "mltd/store.hpp"

#include <fcntl.h>
#include <unistd.h>
#include <zlib.h>

#include <cerrno>
#include <cstring>
#include <set>

#include "binio.hpp"
#include "json.hpp"
#include "mltd/error.hpp"

namespace mltd {

namespace {

using json = nlohmann::json;

constexpr char kMagic[] = "MLTDCKPT";

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (size > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    size -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::size_t element_size(DType d) { return d == DType::kFloat64 ? 8 : 4; }

json model_to_json(const ModelConfig& m) {
  return json{{"vocab_size", m.vocab_size}, {"d_model", m.d_model},       {"n_layers", m.n_layers},
              {"n_heads", m.n_heads},       {"d_ffn", m.d_ffn},           {"max_seq_len", m.max_seq_len},
              {"tied_head", m.tied_head},   {"dtype", m.dtype == DType::kFloat32 ? "float32" : "float64"}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.vocab_size = j.at("vocab_size");
  m.d_model = j.at("d_model");
  m.n_layers = j.at("n_layers");
  m.n_heads = j.at("n_heads");
  m.d_ffn = j.at("d_ffn");
  m.max_seq_len = j.at("max_seq_len");
  m.tied_head = j.at("tied_head");
  m.dtype = j.at("dtype") == "float32" ? DType::kFloat32 : DType::kFloat64;
  return m;
}

json overlay_to_json(const OverlayConfig& o) {
  return json{{"tarp",
               {{"kind", decomp_name(o.tarp.kind)},
                {"rank", o.tarp.rank},
                {"kron_n", o.tarp.kron_n},
                {"sigma_hidden", o.tarp.sigma_hidden},
                {"additive_only", o.tarp.additive_only},
                {"top_k", o.tarp.top_k}}},
              {"attach", o.attach},
              {"tams",
               {{"enabled", o.tams_enabled},
                {"reduced_dim", o.tams.reduced_dim},
                {"n_intermediate", o.tams.n_intermediate},
                {"controller_hidden", o.tams.controller_hidden},
                {"discrete_alpha", o.discrete_alpha}}}};
}

OverlayConfig overlay_from_json(const json& j) {
  OverlayConfig o;
  const auto& t = j.at("tarp");
  o.tarp.kind = parse_decomp(t.at("kind").get<std::string>());
  o.tarp.rank = t.at("rank");
  o.tarp.kron_n = t.at("kron_n");
  o.tarp.sigma_hidden = t.at("sigma_hidden");
  o.tarp.additive_only = t.at("additive_only");
  o.tarp.top_k = t.at("top_k");
  o.attach = j.at("attach").get<std::vector<std::string>>();
  const auto& c = j.at("tams");
  o.tams_enabled = c.at("enabled");
  o.tams.reduced_dim = c.at("reduced_dim");
  o.tams.n_intermediate = c.at("n_intermediate");
  o.tams.controller_hidden = c.at("controller_hidden");
  o.discrete_alpha = c.at("discrete_alpha");
  return o;
}

void write_all(int fd, const std::string& bytes, const std::filesystem::path& path) {
  const char* p = bytes.data();
  std::size_t left = bytes.size();
  while (left > 0) {
    const ssize_t n = ::write(fd, p, left);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("writing '" + path.string() + "': " + std::strerror(errno));
    }
    p += n;
    left -= static_cast<std::size_t>(n);
  }
}

}  // namespace

std::string encode_checkpoint(const CheckpointData& data) {
  std::vector<std::uint8_t> out;
  binio::put_bytes(out, std::string_view(kMagic, 8));
  binio::put<std::uint32_t>(out, kCheckpointVersion);
  binio::put<std::uint64_t>(out, data.config_json.size());
  binio::put_bytes(out, data.config_json);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(data.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : data.tensors) {
    if (!t.defined()) throw Error("checkpoint: tensor '" + name + "' is undefined");
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    binio::put_bytes(out, name);
    out.push_back(static_cast<std::uint8_t>(t.dtype()));
    if (t.rank() > 255) throw Error("checkpoint: tensor '" + name + "' has rank above 255");
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) binio::put<std::uint64_t>(out, d);
    binio::put<std::uint64_t>(out, offset);
    offset += t.size() * element_size(t.dtype());
  }
  for (const auto& [name, t] : data.tensors) {
    for (double v : t.data()) {
      if (t.dtype() == DType::kFloat64) {
        binio::put_f64(out, v);
      } else {
        binio::put_f32(out, static_cast<float>(v));
      }
    }
  }
  binio::put<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return std::string(out.begin(), out.end());
}

CheckpointData decode_checkpoint(std::string_view bytes) {
  const auto* base = reinterpret_cast<const std::uint8_t*>(bytes.data());
  if (bytes.size() < 8 + 4 + 4) throw FormatError("header", "file too short to be a checkpoint");
  binio::Reader r(base, bytes.size() - 4);
  r.section("header");
  if (r.get_bytes(8) != std::string_view(kMagic, 8)) r.fail("unknown magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("header", "unsupported checkpoint version " + std::to_string(version) +
                                                " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointData data;
  r.section("config");
  const auto json_len = r.get<std::uint64_t>();
  if (json_len > r.remaining()) r.fail("config length exceeds file size");
  data.config_json = r.get_bytes(static_cast<std::size_t>(json_len));

  r.section("directory");
  const auto count = r.get<std::uint32_t>();
  struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto name_len = r.get<std::uint32_t>();
    e.name = r.get_bytes(name_len);
    if (!names.insert(e.name).second) r.fail("duplicate tensor name '" + e.name + "'");
    const auto code = r.get<std::uint8_t>();
    if (code > 1) r.fail("unknown dtype code " + std::to_string(code) + " for '" + e.name + "'");
    e.dtype = static_cast<DType>(code);
    const auto rank = r.get<std::uint8_t>();
    for (int d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint64_t>());
    e.offset = r.get<std::uint64_t>();
    entries.push_back(std::move(e));
  }

  r.section("payload");
  const std::size_t payload_size = r.remaining();
  const std::uint8_t* payload = r.take(payload_size);
  for (const auto& e : entries) {
    const std::uint64_t bytes_needed = static_cast<std::uint64_t>(shape_size(e.shape)) * element_size(e.dtype);
    if (e.offset > payload_size || bytes_needed > payload_size - e.offset) {
      r.fail("tensor '" + e.name + "' extends past the payload");
    }
  }
  // structure first so a truncated file reports the section it ends in
  {
    binio::Reader tail(base + bytes.size() - 4, 4);
    tail.section("crc");
    const auto stored = tail.get<std::uint32_t>();
    if (stored != crc32_of(base, bytes.size() - 4)) throw FormatError("crc", "CRC-32 mismatch, file is corrupt");
  }
  for (const auto& e : entries) {
    const std::size_t n = shape_size(e.shape);
    const std::uint64_t bytes_needed = static_cast<std::uint64_t>(n) * element_size(e.dtype);
    binio::Reader pr(payload + e.offset, static_cast<std::size_t>(bytes_needed));
    pr.section("payload");
    std::vector<double> values(n);
    for (auto& v : values) v = e.dtype == DType::kFloat64 ? pr.get_f64() : static_cast<double>(pr.get_f32());
    data.tensors.emplace(e.name, Tensor(e.shape, std::move(values), e.dtype));
  }
  return data;
}

void write_checkpoint(const CheckpointData& data, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(data);
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw IoError("cannot create '" + tmp.string() + "': " + std::strerror(errno));
  try {
    write_all(fd, bytes, tmp);
    if (::fsync(fd) != 0) throw IoError("fsync '" + tmp.string() + "': " + std::strerror(errno));
  } catch (...) {
    ::close(fd);
    ::unlink(tmp.c_str());
    throw;
  }
  if (::close(fd) != 0) {
    ::unlink(tmp.c_str());
    throw IoError("closing '" + tmp.string() + "': " + std::strerror(errno));
  }
  if (::rename(tmp.c_str(), path.c_str()) != 0) {
    const int err = errno;
    ::unlink(tmp.c_str());
    throw IoError("renaming to '" + path.string() + "': " + std::strerror(err));
  }
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  return decode_checkpoint(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::string encode_state_config(const MetaState& state) {
  json j{{"model", model_to_json(state.model)},
         {"overlay", overlay_to_json(state.overlay)},
         {"adam",
          {{"step", state.adam.step},
           {"lr", state.adam.lr},
           {"beta1", state.adam.beta1},
           {"beta2", state.adam.beta2},
           {"eps", state.adam.eps}}},
         {"meta_iter", state.meta_iter},
         {"seed", state.seed},
         {"rng_state", rng_state(state.rng)}};
  return j.dump();
}

CheckpointData state_to_checkpoint(const MetaState& state, bool compact) {
  CheckpointData data;
  data.config_json = encode_state_config(state);
  const DType dt = compact ? DType::kFloat32 : DType::kFloat64;
  for (const auto& [k, t] : state.params) data.tensors.emplace("param/" + k, compact ? t.to(dt) : t);
  for (const auto& [k, t] : state.adam.m) data.tensors.emplace("adam.m/" + k, compact ? t.to(dt) : t);
  for (const auto& [k, t] : state.adam.v) data.tensors.emplace("adam.v/" + k, compact ? t.to(dt) : t);
  return data;
}

MetaState checkpoint_to_state(const CheckpointData& data) {
  MetaState st;
  try {
    const json j = json::parse(data.config_json);
    st.model = model_from_json(j.at("model"));
    st.overlay = overlay_from_json(j.at("overlay"));
    const auto& a = j.at("adam");
    st.adam.step = a.at("step");
    st.adam.lr = a.at("lr");
    st.adam.beta1 = a.at("beta1");
    st.adam.beta2 = a.at("beta2");
    st.adam.eps = a.at("eps");
    st.meta_iter = j.at("meta_iter");
    st.seed = j.at("seed");
    st.rng = rng_from_state(j.at("rng_state").get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError("config", e.what());
  } catch (const ConfigError& e) {
    throw FormatError("config", e.what());
  }
  for (const auto& [name, t] : data.tensors) {
    const auto slash = name.find('/');
    if (slash == std::string::npos) throw FormatError("directory", "tensor name '" + name + "' has no group prefix");
    const std::string group = name.substr(0, slash), key = name.substr(slash + 1);
    // parameters are always computed on in float64
    Tensor v = t.dtype() == DType::kFloat64 ? t : t.to(DType::kFloat64);
    if (group == "param") {
      st.params.emplace(key, v);
    } else if (group == "adam.m") {
      st.adam.m.emplace(key, v);
    } else if (group == "adam.v") {
      st.adam.v.emplace(key, v);
    } else {
      throw FormatError("directory", "unknown tensor group '" + group + "'");
    }
  }
  return st;
}

void save_checkpoint(const MetaState& state, const std::filesystem::path& path, bool compact) {
  write_checkpoint(state_to_checkpoint(state, compact), path);
}

MetaState load_checkpoint(const std::filesystem::path& path) { return checkpoint_to_state(read_checkpoint(path)); }

}  // namespace mltd
