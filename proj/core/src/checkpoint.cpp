#include "stda/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace stda {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'S', 'T', 'D', 'A', 'C', 'K', 'P', 'T'};

}  // namespace

const CheckpointArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

Checkpoint snapshot(const nn::ParamSet<float>& set, nlohmann::json config, nlohmann::json meta) {
  Checkpoint ck;
  ck.config = std::move(config);
  ck.meta = std::move(meta);
  for (const auto& p : set.params()) {
    const auto& v = p.var->value();
    ck.arrays.push_back({p.name, v.shape(), std::vector<float>(v.data(), v.data() + v.numel())});
  }
  for (const auto& b : set.buffers()) {
    ck.arrays.push_back({b.name, b.tensor->shape(), b.tensor->storage()});
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["dtype"] = "f32";
  header["config"] = ckpt.config;
  header["meta"] = ckpt.meta;
  header["arrays"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    require(static_cast<int64_t>(a.data.size()) == shape_numel(a.shape), ErrorCode::kShape,
            "checkpoint array " + a.name + " does not match its shape");
    const uint64_t nbytes = a.data.size() * sizeof(float);
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write checkpoint " + path.string());
  const auto len = static_cast<uint32_t>(text.size());
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : ckpt.arrays) {
    out.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * sizeof(float)));
  }
  require(out.good(), ErrorCode::kIo, "short write to checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot read checkpoint " + path.string());
  char magic[8];
  uint32_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  require(in.good() && std::memcmp(magic, kMagic, sizeof kMagic) == 0, ErrorCode::kFormat,
          path.string() + " is not a checkpoint");
  std::string text(len, '\0');
  in.read(text.data(), len);
  require(in.good(), ErrorCode::kFormat, "truncated checkpoint header in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, "corrupt checkpoint header: " + std::string(e.what()));
  }
  require(header.contains("format_version"), ErrorCode::kFormat, "checkpoint has no format_version");
  require(header["format_version"].get<int>() == kCheckpointVersion, ErrorCode::kFormat,
          "unsupported checkpoint version " + header["format_version"].dump());
  require(header.value("dtype", "") == "f32", ErrorCode::kFormat, "unsupported checkpoint dtype");
  Checkpoint ck;
  ck.config = header.value("config", nlohmann::json::object());
  ck.meta = header.value("meta", nlohmann::json::object());
  const auto blob_start = in.tellg();
  for (const auto& a : header.at("arrays")) {
    CheckpointArray arr;
    arr.name = a.at("name").get<std::string>();
    arr.shape = a.at("shape").get<Shape>();
    const auto nbytes = a.at("nbytes").get<uint64_t>();
    require(nbytes == static_cast<uint64_t>(shape_numel(arr.shape)) * sizeof(float), ErrorCode::kFormat,
            "checkpoint array " + arr.name + " byte length does not match its shape");
    arr.data.resize(nbytes / sizeof(float));
    in.seekg(blob_start + static_cast<std::streamoff>(a.at("offset").get<uint64_t>()));
    in.read(reinterpret_cast<char*>(arr.data.data()), static_cast<std::streamsize>(nbytes));
    require(in.good(), ErrorCode::kFormat, "truncated checkpoint data for " + arr.name);
    ck.arrays.push_back(std::move(arr));
  }
  return ck;
}

void restore(nn::ParamSet<float>& set, const Checkpoint& ckpt) {
  std::map<std::string, const CheckpointArray*> stored;
  for (const auto& a : ckpt.arrays) stored[a.name] = &a;
  std::vector<std::string> diffs;
  auto check = [&](const std::string& name, const Shape& want) {
    auto it = stored.find(name);
    if (it == stored.end()) {
      diffs.push_back("missing " + name + " " + shape_str(want));
      return static_cast<const CheckpointArray*>(nullptr);
    }
    const auto* a = it->second;
    stored.erase(it);
    if (a->shape != want) {
      diffs.push_back("shape " + name + ": model " + shape_str(want) + " vs checkpoint " + shape_str(a->shape));
      return static_cast<const CheckpointArray*>(nullptr);
    }
    return a;
  };
  std::vector<std::pair<float*, const CheckpointArray*>> copies;
  for (const auto& p : set.params()) {
    if (const auto* a = check(p.name, p.var->shape())) copies.push_back({p.var->mutable_value().data(), a});
  }
  for (const auto& b : set.buffers()) {
    if (const auto* a = check(b.name, b.tensor->shape())) copies.push_back({b.tensor->data(), a});
  }
  for (const auto& [name, a] : stored) diffs.push_back("unexpected " + name + " " + shape_str(a->shape));
  if (!diffs.empty()) {
    std::string msg = "checkpoint does not match the model (" + std::to_string(diffs.size()) + " differences):";
    for (const auto& d : diffs) msg += " [" + d + "]";
    fail(ErrorCode::kShape, msg);
  }
  for (auto& [dst, a] : copies) std::copy(a->data.begin(), a->data.end(), dst);
}

}  // namespace stda
