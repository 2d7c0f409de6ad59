#include "protodet/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace protodet {

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

Tensor& ParamRegistry::add(const std::string& name, Tensor tensor) {
    if (find(name)) throw std::invalid_argument("ParamRegistry: duplicate name '" + name + "'");
    tensor.set_requires_grad(true);
    entries_.emplace_back(name, std::move(tensor));
    return entries_.back().second;
}

Tensor* ParamRegistry::find(const std::string& name) {
    for (auto& [n, t] : entries_)
        if (n == name) return &t;
    return nullptr;
}

const Tensor* ParamRegistry::find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return &t;
    return nullptr;
}

void ParamRegistry::zero_grads() {
    for (auto& [n, t] : entries_) t.zero_grad();
}

int64_t ParamRegistry::total_elements() const {
    int64_t total = 0;
    for (const auto& [n, t] : entries_) total += t.numel();
    return total;
}

static constexpr char kCheckpointTag[8] = {'P', 'D', 'C', 'K', 'P', 'T', '0', '1'};

template <typename T>
static void write_pod(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
static T read_pod(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated stream");
    return value;
}

void ParamRegistry::save(std::ostream& out) const {
    out.write(kCheckpointTag, sizeof(kCheckpointTag));
    for (const auto& [name, t] : entries_) {
        write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
        for (int d : t.shape()) write_pod<uint64_t>(out, static_cast<uint64_t>(d));
        out.write(reinterpret_cast<const char*>(t.data().data()),
                  static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed");
}

void ParamRegistry::save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    save(out);
}

std::vector<std::pair<std::string, Tensor>> ParamRegistry::read_entries(std::istream& in) {
    char tag[8];
    in.read(tag, sizeof(tag));
    if (!in || std::memcmp(tag, kCheckpointTag, sizeof(tag)) != 0)
        throw std::runtime_error("checkpoint: bad version tag");
    std::vector<std::pair<std::string, Tensor>> entries;
    while (true) {
        uint32_t name_len = 0;
        in.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        if (in.eof()) break;
        if (!in) throw std::runtime_error("checkpoint: truncated stream");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const uint32_t rank = read_pod<uint32_t>(in);
        Shape shape(rank);
        int64_t numel = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<int>(read_pod<uint64_t>(in));
            numel *= shape[i];
        }
        std::vector<double> data(static_cast<size_t>(numel));
        in.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated payload for '" + name + "'");
        entries.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return entries;
}

void ParamRegistry::load(std::istream& in) {
    auto loaded = read_entries(in);
    if (loaded.size() != entries_.size())
        throw std::runtime_error("checkpoint: entry count mismatch, file has " +
                                 std::to_string(loaded.size()) + ", registry has " +
                                 std::to_string(entries_.size()));
    for (auto& [name, tensor] : loaded) {
        Tensor* dst = find(name);
        if (!dst) throw std::runtime_error("checkpoint: unknown entry '" + name + "'");
        if (dst->shape() != tensor.shape())
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': file " +
                                     shape_str(tensor.shape()) + " vs registry " +
                                     shape_str(dst->shape()));
        dst->data() = tensor.data();
        dst->zero_grad();
    }
}

void ParamRegistry::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    load(in);
}

SgdOptimizer::SgdOptimizer(ParamRegistry& params, double lr, double momentum, double weight_decay)
    : params_(&params), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    velocity_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i)
        velocity_[i].assign(params.entries()[i].second.data().size(), 0.0);
}

void SgdOptimizer::step() {
    if (velocity_.size() != params_->size())
        throw std::runtime_error("SgdOptimizer: registry changed size after construction");
    for (size_t i = 0; i < params_->size(); ++i) {
        Tensor& p = params_->entries()[i].second;
        auto& v = velocity_[i];
        auto& data = p.data();
        const bool has_grad = p.has_grad();
        const std::vector<double>* g = has_grad ? &p.grad() : nullptr;
        for (size_t j = 0; j < data.size(); ++j) {
            const double gj = has_grad ? (*g)[j] : 0.0;
            v[j] = momentum_ * v[j] + gj + weight_decay_ * data[j];
            data[j] -= lr_ * v[j];
        }
        p.zero_grad();
    }
}

}  // namespace protodet
