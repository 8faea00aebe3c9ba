#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flowdistill/layers.hpp"
#include "flowdistill/tensor.hpp"

namespace flowdistill {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// On-disk model container: a line-oriented text header (magic, `meta` pairs,
// one `param <name> <shape-csv> <offset>` line per tensor, `end`) followed by
// a packed float32 little-endian body. Offsets count floats from the start of
// the body. Saving the result of a load reproduces the file byte for byte.
class Checkpoint {
 public:
  std::map<std::string, std::string> meta;

  void add_entry(std::string name, Shape shape, std::vector<float> values);
  const CheckpointEntry* find(const std::string& name) const;
  const std::vector<CheckpointEntry>& entries() const { return entries_; }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  int meta_int(const std::string& key) const;
  double meta_double(const std::string& key) const;
  const std::string& meta_str(const std::string& key) const;

  template <typename T>
  void add_params(const ParamMap<T>& params) {
    for (const auto& [name, t] : params) {
      std::vector<float> values(t.size());
      const auto d = t.data();
      for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = static_cast<float>(d[i]);
      add_entry(name, t.shape(), std::move(values));
    }
  }

  // Copies stored values into an existing parameter set. Every parameter must
  // be present with a matching shape and every stored tensor must be used;
  // anything else reports the offending names.
  template <typename T>
  void load_params_into(const ParamMap<T>& params) const {
    std::vector<bool> used(entries_.size(), false);
    for (const auto& [name, t] : params) {
      const CheckpointEntry* e = nullptr;
      for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name == name) {
          e = &entries_[i];
          used[i] = true;
          break;
        }
      }
      check(e != nullptr, "checkpoint: missing tensor '" + name + "'");
      check(e->shape == t.shape(),
            "checkpoint: tensor '" + name + "' has shape " + shape_str(e->shape) +
                " but the model expects " + shape_str(t.shape()));
      auto d = t.data();
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = static_cast<T>(e->values[i]);
    }
    for (std::size_t i = 0; i < entries_.size(); ++i)
      check(used[i], "checkpoint: stored tensor '" + entries_[i].name +
                         "' has no matching model parameter");
  }

 private:
  std::vector<CheckpointEntry> entries_;
};

}  // namespace flowdistill
