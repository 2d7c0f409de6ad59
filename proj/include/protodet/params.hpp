#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "protodet/tensor.hpp"

namespace protodet {

// Named, insertion-ordered collection of trainable tensors. The ordering is
// the unit of SGD updates and the on-disk checkpoint layout.
class ParamRegistry {
  public:
    Tensor& add(const std::string& name, Tensor tensor);
    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;

    size_t size() const { return entries_.size(); }
    std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    void zero_grads();
    int64_t total_elements() const;

    // Checkpoint: version tag, then per entry name length + name bytes +
    // rank + dims + little-endian f64 payload. Bit-exact round-trip.
    void save(std::ostream& out) const;
    void save_file(const std::string& path) const;
    // Fills existing entries by name; every entry must be present with a
    // matching shape.
    void load(std::istream& in);
    void load_file(const std::string& path);
    static std::vector<std::pair<std::string, Tensor>> read_entries(std::istream& in);

  private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

// SGD with momentum and weight decay. Velocity buffers persist across steps
// and follow registry order. A parameter with no accumulated gradient is
// treated as grad 0 and still decays.
class SgdOptimizer {
  public:
    SgdOptimizer(ParamRegistry& params, double lr, double momentum, double weight_decay);

    void step();
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

  private:
    ParamRegistry* params_;
    double lr_, momentum_, weight_decay_;
    std::vector<std::vector<double>> velocity_;
};

}  // namespace protodet
