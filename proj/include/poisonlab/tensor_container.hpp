#pragma once

// Single-file weight container:
//
//   [u64 little-endian header length N][N bytes of JSON header][float32 LE payload]
//
// The header maps tensor name -> {"dtype": "F32", "shape": [...], "byte_range": [b, e]}
// with payload-relative offsets. Ranges tile the payload exactly: non-overlapping,
// in bounds, summing to the payload length. The writer emits tensors in name order
// with contiguous ranges and a compact header, so write(read(f)) reproduces f.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "poisonlab/common.hpp"

namespace poisonlab {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

class TensorContainer {
 public:
  void put(const std::string& name, Tensor tensor) {
    if (tensor.element_count() != tensor.data.size())
      throw runtime_error("tensor '" + name + "': data size does not match shape");
    tensors_[name] = std::move(tensor);
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    const auto it = tensors_.find(name);
    if (it == tensors_.end()) throw data_error("missing tensor '" + name + "'");
    return it->second;
  }

  /// Fetches a tensor and checks its shape; the loader never guesses.
  const Tensor& expect(const std::string& name, const std::vector<std::size_t>& shape) const {
    const Tensor& t = at(name);
    if (t.shape != shape) {
      throw data_error("tensor '" + name + "' has shape " + nlohmann::json(t.shape).dump() +
                       ", manifest implies " + nlohmann::json(shape).dump());
    }
    return t;
  }

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  std::string serialize() const {
    nlohmann::json header = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors_) {
      const std::uint64_t bytes = t.data.size() * sizeof(float);
      header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"byte_range", {offset, offset + bytes}}};
      offset += bytes;
    }
    const std::string header_text = header.dump();
    std::string out;
    out.reserve(8 + header_text.size() + offset);
    const std::uint64_t header_len = header_text.size();
    out.append(reinterpret_cast<const char*>(&header_len), 8);
    out += header_text;
    for (const auto& [name, t] : tensors_)
      out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    return out;
  }

  static TensorContainer parse(std::string_view bytes) {
    if (bytes.size() < 8) throw data_error("container shorter than its 8-byte header length");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    if (header_len > bytes.size() - 8) throw data_error("header length exceeds file size");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(bytes.substr(8, header_len));
    } catch (const nlohmann::json::exception& e) {
      throw data_error(std::string("malformed container header: ") + e.what());
    }
    if (!header.is_object()) throw data_error("malformed container header: not an object");
    const std::string_view payload = bytes.substr(8 + header_len);

    struct Entry {
      std::string name;
      std::vector<std::size_t> shape;
      std::uint64_t begin, end;
    };
    std::vector<Entry> entries;
    std::uint64_t declared_total = 0;
    for (const auto& [name, meta] : header.items()) {
      try {
        if (meta.at("dtype").get<std::string>() != "F32")
          throw data_error("tensor '" + name + "': unsupported dtype");
        Entry e{name, meta.at("shape").get<std::vector<std::size_t>>(),
                meta.at("byte_range").at(0).get<std::uint64_t>(),
                meta.at("byte_range").at(1).get<std::uint64_t>()};
        if (meta.at("byte_range").size() != 2 || e.end < e.begin)
          throw data_error("tensor '" + name + "': malformed byte_range");
        std::uint64_t elements = 1;
        for (auto s : e.shape) elements *= s;
        if (elements * sizeof(float) != e.end - e.begin)
          throw data_error("tensor '" + name + "': shape does not match byte_range length");
        declared_total += e.end - e.begin;
        entries.push_back(std::move(e));
      } catch (const nlohmann::json::exception& ex) {
        throw data_error("malformed container header entry '" + name + "': " + ex.what());
      }
    }
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.begin < b.begin; });
    for (std::size_t i = 1; i < entries.size(); ++i) {
      if (entries[i].begin < entries[i - 1].end)
        throw data_error("overlapping byte ranges: '" + entries[i - 1].name + "' and '" + entries[i].name + "'");
    }
    if (!entries.empty() && entries.back().end > payload.size())
      throw data_error("payload shorter than declared ranges");
    if (declared_total != payload.size())
      throw data_error("declared ranges cover " + std::to_string(declared_total) + " bytes but payload has " +
                       std::to_string(payload.size()));

    TensorContainer out;
    for (auto& e : entries) {
      Tensor t;
      t.shape = std::move(e.shape);
      t.data.resize((e.end - e.begin) / sizeof(float));
      std::memcpy(t.data.data(), payload.data() + e.begin, e.end - e.begin);
      out.tensors_[e.name] = std::move(t);
    }
    return out;
  }

  static TensorContainer load(const std::filesystem::path& path) { return parse(read_file(path)); }
  void save(const std::filesystem::path& path) const { write_file(path, serialize()); }

 private:
  std::map<std::string, Tensor> tensors_;
};

}  // namespace poisonlab
