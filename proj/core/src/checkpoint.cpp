#include "flowdistill/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace flowdistill {

namespace {

constexpr const char* kMagic = "flowdistill-checkpoint 1";

std::string shape_csv(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape_csv(const std::string& csv) {
  Shape s;
  std::size_t pos = 0;
  while (pos < csv.size()) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(csv.substr(pos), &used);
    } catch (const std::exception&) {
      throw std::runtime_error("checkpoint: bad shape '" + csv + "'");
    }
    if (v <= 0) throw std::runtime_error("checkpoint: bad shape '" + csv + "'");
    s.push_back(v);
    pos += used;
    if (pos < csv.size()) {
      if (csv[pos] != ',') throw std::runtime_error("checkpoint: bad shape '" + csv + "'");
      ++pos;
    }
  }
  if (s.empty()) throw std::runtime_error("checkpoint: empty shape");
  return s;
}

void put_f32_le(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  out.push_back(static_cast<char>(bits & 0xff));
  out.push_back(static_cast<char>((bits >> 8) & 0xff));
  out.push_back(static_cast<char>((bits >> 16) & 0xff));
  out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

float get_f32_le(const unsigned char* p) {
  const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                             (static_cast<std::uint32_t>(p[1]) << 8) |
                             (static_cast<std::uint32_t>(p[2]) << 16) |
                             (static_cast<std::uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void Checkpoint::add_entry(std::string name, Shape shape,
                           std::vector<float> values) {
  check(!name.empty() && name.find(' ') == std::string::npos &&
            name.find('\n') == std::string::npos,
        "checkpoint: tensor name '" + name + "' must be non-empty without spaces");
  check(numel(shape) == values.size(),
        "checkpoint: tensor '" + name + "' shape " + shape_str(shape) +
            " does not match " + std::to_string(values.size()) + " values");
  for (const auto& e : entries_)
    check(e.name != name, "checkpoint: duplicate tensor '" + name + "'");
  entries_.push_back({std::move(name), std::move(shape), std::move(values)});
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

int Checkpoint::meta_int(const std::string& key) const {
  const auto it = meta.find(key);
  if (it == meta.end())
    throw std::runtime_error("checkpoint: missing meta key '" + key + "'");
  return std::stoi(it->second);
}

double Checkpoint::meta_double(const std::string& key) const {
  const auto it = meta.find(key);
  if (it == meta.end())
    throw std::runtime_error("checkpoint: missing meta key '" + key + "'");
  return std::stod(it->second);
}

const std::string& Checkpoint::meta_str(const std::string& key) const {
  const auto it = meta.find(key);
  if (it == meta.end())
    throw std::runtime_error("checkpoint: missing meta key '" + key + "'");
  return it->second;
}

void Checkpoint::save(const std::string& path) const {
  std::string out;
  out += kMagic;
  out += '\n';
  for (const auto& [k, v] : meta) {
    check(!k.empty() && k.find(' ') == std::string::npos &&
              k.find('\n') == std::string::npos,
          "checkpoint: meta key '" + k + "' must be non-empty without spaces");
    check(v.find('\n') == std::string::npos,
          "checkpoint: meta value for '" + k + "' must be single-line");
    out += "meta " + k + " " + v + "\n";
  }
  std::size_t offset = 0;
  for (const auto& e : entries_) {
    out += "param " + e.name + " " + shape_csv(e.shape) + " " +
           std::to_string(offset) + "\n";
    offset += e.values.size();
  }
  out += "end\n";
  out.reserve(out.size() + offset * 4);
  for (const auto& e : entries_)
    for (float v : e.values) put_f32_le(out, v);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write to " + path + " failed");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  const std::string raw = buf.str();

  Checkpoint ckpt;
  struct PendingEntry {
    std::string name;
    Shape shape;
    std::size_t offset;
  };
  std::vector<PendingEntry> pending;

  std::size_t pos = 0;
  bool saw_magic = false, saw_end = false;
  while (pos < raw.size()) {
    const std::size_t nl = raw.find('\n', pos);
    if (nl == std::string::npos)
      throw std::runtime_error("checkpoint: truncated header in " + path);
    const std::string line = raw.substr(pos, nl - pos);
    pos = nl + 1;
    if (!saw_magic) {
      if (line != kMagic)
        throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file (bad magic line)");
      saw_magic = true;
      continue;
    }
    if (line == "end") {
      saw_end = true;
      break;
    }
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      if (key.empty())
        throw std::runtime_error("checkpoint: malformed meta line '" + line + "'");
      ckpt.meta[key] = value;
    } else if (tag == "param") {
      std::string name, csv;
      long long offset = -1;
      ls >> name >> csv >> offset;
      if (name.empty() || csv.empty() || offset < 0 || !ls)
        throw std::runtime_error("checkpoint: malformed param line '" + line + "'");
      pending.push_back({name, parse_shape_csv(csv), static_cast<std::size_t>(offset)});
    } else {
      throw std::runtime_error("checkpoint: unknown header line '" + line + "'");
    }
  }
  if (!saw_end) throw std::runtime_error("checkpoint: missing 'end' line in " + path);

  const std::size_t body_bytes = raw.size() - pos;
  std::size_t total = 0;
  for (const auto& p : pending) total += numel(p.shape);
  if (body_bytes != total * 4)
    throw std::runtime_error("checkpoint: body of " + path + " holds " +
                             std::to_string(body_bytes / 4) + " floats, header expects " +
                             std::to_string(total));

  const unsigned char* body =
      reinterpret_cast<const unsigned char*>(raw.data()) + pos;
  for (const auto& p : pending) {
    const std::size_t count = numel(p.shape);
    if (p.offset + count > total)
      throw std::runtime_error("checkpoint: tensor '" + p.name + "' runs past the body");
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i)
      values[i] = get_f32_le(body + (p.offset + i) * 4);
    ckpt.add_entry(p.name, p.shape, std::move(values));
  }
  return ckpt;
}

}  // namespace flowdistill
