#include "smc/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "smc/config.hpp"

namespace smc {

namespace {

constexpr char kMagic[] = "smc-checkpoint v1";

struct Header {
  std::uint64_t hash = 0;
  std::int64_t step = 0;
  std::string config;
  struct Entry {
    std::string name;
    Shape shape;
  };
  std::vector<Entry> entries;
  std::streampos payload_start;
};

Header read_header(std::ifstream& in, const std::string& path, bool with_entries) {
  Header h;
  std::string line;
  if (!std::getline(in, line) || line != kMagic) {
    throw UsageError("checkpoint " + path + " has an unrecognized header");
  }
  std::string word;
  if (!std::getline(in, line)) throw UsageError("checkpoint " + path + ": truncated header");
  {
    std::istringstream ls(line);
    ls >> word >> std::hex >> h.hash;
    if (word != "hash") throw UsageError("checkpoint " + path + ": missing hash line");
  }
  if (!std::getline(in, line)) throw UsageError("checkpoint " + path + ": truncated header");
  {
    std::istringstream ls(line);
    ls >> word >> h.step;
    if (word != "step") throw UsageError("checkpoint " + path + ": missing step line");
  }
  if (!std::getline(in, line)) throw UsageError("checkpoint " + path + ": truncated header");
  std::size_t config_bytes = 0;
  {
    std::istringstream ls(line);
    ls >> word >> config_bytes;
    if (word != "config") throw UsageError("checkpoint " + path + ": missing config line");
  }
  h.config.resize(config_bytes);
  in.read(h.config.data(), static_cast<std::streamsize>(config_bytes));
  if (!in) throw UsageError("checkpoint " + path + ": truncated config block");
  if (text_hash(h.config) != h.hash) {
    throw UsageError("checkpoint " + path + ": config hash mismatch (corrupt file)");
  }
  if (!with_entries) return h;

  if (!std::getline(in, line)) throw UsageError("checkpoint " + path + ": truncated header");
  std::size_t count = 0;
  {
    std::istringstream ls(line);
    ls >> word >> count;
    if (word != "tensors") throw UsageError("checkpoint " + path + ": missing tensor count");
  }
  h.entries.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) {
      throw UsageError("checkpoint " + path + ": truncated tensor table");
    }
    std::istringstream ls(line);
    Header::Entry e;
    std::string dtype;
    int rank = 0;
    ls >> e.name >> dtype >> rank;
    if (dtype != "f32" || rank < 0) {
      throw UsageError("checkpoint " + path + ": unsupported tensor entry '" + line + "'");
    }
    for (int r = 0; r < rank; ++r) {
      std::int64_t d = 0;
      ls >> d;
      e.shape.push_back(d);
    }
    h.entries.push_back(std::move(e));
  }
  if (!std::getline(in, line) || line != "payload") {
    throw UsageError("checkpoint " + path + ": missing payload marker");
  }
  h.payload_start = in.tellg();
  return h;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamRegistry& reg,
                     const std::string& config_text, std::int64_t step) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot open checkpoint for writing: " + path);
  out << kMagic << "\n";
  char hashbuf[20];
  std::snprintf(hashbuf, sizeof(hashbuf), "%016llx",
                static_cast<unsigned long long>(text_hash(config_text)));
  out << "hash " << hashbuf << "\n";
  out << "step " << step << "\n";
  out << "config " << config_text.size() << "\n";
  out << config_text;
  out << "tensors " << reg.items().size() << "\n";
  for (const auto& item : reg.items()) {
    out << item.name << " f32 " << item.tensor.shape().size();
    for (auto d : item.tensor.shape()) out << " " << d;
    out << "\n";
  }
  out << "payload\n";
  for (const auto& item : reg.items()) {
    auto vals = item.tensor.values();
    std::vector<float> f32(vals.size());
    for (std::size_t i = 0; i < vals.size(); ++i) f32[i] = static_cast<float>(vals[i]);
    out.write(reinterpret_cast<const char*>(f32.data()),
              static_cast<std::streamsize>(f32.size() * sizeof(float)));
  }
  if (!out) throw UsageError("failed writing checkpoint: " + path);
}

std::string read_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint: " + path);
  return read_header(in, path, /*with_entries=*/false).config;
}

std::int64_t load_checkpoint(const std::string& path, ParamRegistry& reg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint: " + path);
  Header h = read_header(in, path, /*with_entries=*/true);
  const auto& items = reg.items();
  if (h.entries.size() != items.size()) {
    throw UsageError("checkpoint " + path + " holds " + std::to_string(h.entries.size()) +
                     " tensors but the model has " + std::to_string(items.size()));
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (h.entries[i].name != items[i].name || h.entries[i].shape != items[i].tensor.shape()) {
      throw UsageError("checkpoint " + path + ": tensor " + std::to_string(i) +
                       " mismatch (" + h.entries[i].name + " vs " + items[i].name + ")");
    }
  }
  for (const auto& item : items) {
    std::vector<float> f32(static_cast<std::size_t>(item.tensor.numel()));
    in.read(reinterpret_cast<char*>(f32.data()),
            static_cast<std::streamsize>(f32.size() * sizeof(float)));
    if (!in) throw UsageError("checkpoint " + path + ": truncated payload");
    Tensor t = item.tensor;  // same storage
    auto dst = t.mutable_values();
    for (std::size_t i = 0; i < f32.size(); ++i) dst[i] = static_cast<double>(f32[i]);
  }
  return h.step;
}

}  // namespace smc
