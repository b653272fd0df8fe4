#include "bevtrack/param_store.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace bevtrack {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor ParamStore::create(const std::string& name, Shape shape, std::vector<double> data) {
  if (has(name)) throw ContractError("ParamStore: duplicate parameter name " + name);
  Tensor t = Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
  params_.emplace(name, t);
  return t;
}

Tensor ParamStore::create_zeros(const std::string& name, Shape shape) {
  const std::size_t n = [&] {
    std::size_t p = 1;
    for (std::size_t d : shape) p *= d;
    return p;
  }();
  return create(name, std::move(shape), std::vector<double>(n, 0.0));
}

void ParamStore::alias(const std::string& alias_name, const std::string& canonical) {
  if (has(alias_name)) throw ContractError("ParamStore: alias name already taken: " + alias_name);
  if (!params_.contains(canonical))
    throw ContractError("ParamStore: alias target is not canonical: " + canonical);
  aliases_.emplace(alias_name, canonical);
}

bool ParamStore::has(const std::string& name) const {
  return params_.contains(name) || aliases_.contains(name);
}

std::string ParamStore::resolve(const std::string& name) const {
  auto it = aliases_.find(name);
  return it == aliases_.end() ? name : it->second;
}

bool ParamStore::is_alias(const std::string& name) const { return aliases_.contains(name); }

Tensor ParamStore::get(const std::string& name) const {
  auto it = params_.find(resolve(name));
  if (it == params_.end()) throw ContractError("ParamStore: unknown parameter " + name);
  return it->second;
}

std::size_t ParamStore::total_scalars() const {
  std::size_t n = 0;
  for (auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [_, t] : params_) const_cast<Tensor&>(t).zero_grad();
}

namespace {

void atomic_write(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ParseError("cannot open for writing: " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw ParseError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

static_assert(std::endian::native == std::endian::little,
              "checkpoint blob assumes a little-endian host");

}  // namespace

void ParamStore::save_checkpoint(const std::string& manifest_path) const {
  const fs::path mpath(manifest_path);
  const fs::path bpath = fs::path(mpath).replace_extension(".bin");

  json manifest;
  manifest["format_version"] = 1;
  manifest["blob"] = bpath.filename().string();
  json plist = json::array();
  std::string blob;
  std::size_t offset = 0;
  for (const auto& [name, t] : params_) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    plist.push_back(std::move(entry));
    const std::size_t bytes = t.numel() * sizeof(double);
    const std::size_t pos = blob.size();
    blob.resize(pos + bytes);
    std::memcpy(blob.data() + pos, t.data().data(), bytes);
    offset += bytes;
  }
  manifest["params"] = std::move(plist);

  atomic_write(bpath, blob);
  atomic_write(mpath, manifest.dump(2) + "\n");
}

void ParamStore::load_checkpoint(const std::string& manifest_path) {
  const fs::path mpath(manifest_path);
  std::ifstream mf(mpath);
  if (!mf) throw ParseError("cannot open checkpoint manifest: " + manifest_path);
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::parse_error& e) {
    throw ParseError("checkpoint manifest parse error: " + std::string(e.what()));
  }
  if (manifest.value("format_version", -1) != 1)
    throw ParseError("checkpoint: unsupported format_version");

  const fs::path bpath = mpath.parent_path() / manifest.at("blob").get<std::string>();
  std::ifstream bf(bpath, std::ios::binary);
  if (!bf) throw ParseError("cannot open checkpoint blob: " + bpath.string());
  std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  std::vector<std::string> problems;
  for (const auto& entry : manifest.at("params")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    auto it = params_.find(name);
    if (it == params_.end()) {
      problems.push_back(name + ": not present in model");
      continue;
    }
    Tensor& t = it->second;
    if (t.shape() != shape) {
      std::ostringstream os;
      os << name << ": shape mismatch (checkpoint";
      for (auto d : shape) os << " " << d;
      os << ", model";
      for (auto d : t.shape()) os << " " << d;
      os << ")";
      problems.push_back(os.str());
      continue;
    }
    const std::size_t bytes = t.numel() * sizeof(double);
    if (offset + bytes > blob.size()) {
      problems.push_back(name + ": blob truncated");
      continue;
    }
    std::memcpy(t.data().data(), blob.data() + offset, bytes);
  }
  for (const auto& [name, _] : params_) {
    bool found = false;
    for (const auto& entry : manifest.at("params"))
      if (entry.at("name").get<std::string>() == name) found = true;
    if (!found) problems.push_back(name + ": missing from checkpoint");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint/model mismatch:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw ParseError(msg);
  }
}

}  // namespace bevtrack
