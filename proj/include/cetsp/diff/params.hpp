#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "cetsp/diff/tensor.hpp"
#include "cetsp/rng.hpp"

namespace cetsp::diff {

struct ParamEntry {
    Tensor value;
    Tensor m;  // Adam first moment
    Tensor v;  // Adam second moment
};

// Every learnable block of the model, keyed by name. std::map keeps the
// iteration order stable, which the deterministic-update contract relies on.
struct ParamBlock {
    std::map<std::string, ParamEntry> entries;
    std::int64_t step = 0;

    Tensor& add(const std::string& name, int rows, int cols) {
        auto [it, inserted] = entries.emplace(name, ParamEntry{Tensor(rows, cols), Tensor(rows, cols), Tensor(rows, cols)});
        if (!inserted) throw std::invalid_argument("ParamBlock: duplicate entry '" + name + "'");
        return it->second.value;
    }

    Tensor& at(const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::out_of_range("ParamBlock: no entry '" + name + "'");
        return it->second.value;
    }
    const Tensor& at(const std::string& name) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::out_of_range("ParamBlock: no entry '" + name + "'");
        return it->second.value;
    }

    std::size_t coord_count() const {
        std::size_t total = 0;
        for (const auto& [_, e] : entries) total += e.value.size();
        return total;
    }
};

using GradMap = std::map<std::string, Tensor>;

inline GradMap zero_grads(const ParamBlock& params) {
    GradMap g;
    for (const auto& [name, e] : params.entries) g.emplace(name, Tensor(e.value.rows, e.value.cols));
    return g;
}

inline void accumulate_grads(GradMap& into, const GradMap& from) {
    for (auto& [name, g] : into) {
        const auto it = from.find(name);
        if (it == from.end()) continue;
        for (std::size_t i = 0; i < g.size(); ++i) g.v[i] += it->second.v[i];
    }
}

inline double grad_global_norm(const GradMap& grads) {
    double sq = 0.0;
    for (const auto& [_, g] : grads)
        for (double x : g.v) sq += x * x;
    return std::sqrt(sq);
}

inline void scale_grads(GradMap& grads, double s) {
    for (auto& [_, g] : grads)
        for (double& x : g.v) x *= s;
}

// Bias-corrected Adam with decoupled weight decay.
inline void adam_step(ParamBlock& params, const GradMap& grads, double lr, double beta1 = 0.9,
                      double beta2 = 0.999, double eps = 1e-8, double weight_decay = 1e-6) {
    params.step += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(params.step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(params.step));
    for (auto& [name, e] : params.entries) {
        const auto it = grads.find(name);
        if (it == grads.end()) throw std::invalid_argument("adam_step: missing gradient for '" + name + "'");
        const Tensor& g = it->second;
        if (!g.same_shape(e.value)) throw std::invalid_argument("adam_step: gradient shape mismatch for '" + name + "'");
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            e.m.v[i] = beta1 * e.m.v[i] + (1.0 - beta1) * g.v[i];
            e.v.v[i] = beta2 * e.v.v[i] + (1.0 - beta2) * g.v[i] * g.v[i];
            const double mhat = e.m.v[i] / bc1;
            const double vhat = e.v.v[i] / bc2;
            e.value.v[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * e.value.v[i]);
        }
    }
}

// --- checkpoint file -------------------------------------------------------
//
// Binary, little-endian:
//   magic "CETSPCK1", meta count, meta key/value pairs (string, f64),
//   block count, per block: name, rows, cols, value/m/v payloads (f64),
//   step counter, FNV-1a checksum over everything before it.

namespace detail {

struct Fnv1a {
    std::uint64_t h = 1469598103934665603ull;
    void feed(const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    }
};

class CkptWriter {
public:
    explicit CkptWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    }
    void u64(std::uint64_t x) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((x >> (8 * i)) & 0xff);
        raw(b, 8);
    }
    void f64(double x) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void raw(const void* data, std::size_t len) {
        hash_.feed(data, len);
        out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    }
    void finish() {
        const std::uint64_t checksum = hash_.h;
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((checksum >> (8 * i)) & 0xff);
        out_.write(reinterpret_cast<const char*>(b), 8);
        if (!out_) throw std::runtime_error("checkpoint: write failure");
    }

private:
    std::ofstream out_;
    Fnv1a hash_;
};

class CkptReader {
public:
    explicit CkptReader(const std::string& path) : in_(path, std::ios::binary) {
        if (!in_) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    }
    std::uint64_t u64() {
        unsigned char b[8];
        raw(b, 8);
        std::uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        return x;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double x;
        std::memcpy(&x, &bits, 8);
        return x;
    }
    std::string str() {
        const std::uint64_t len = u64();
        if (len > (1u << 20)) throw std::runtime_error("checkpoint: implausible string length");
        std::string s(len, '\0');
        raw(s.data(), len);
        return s;
    }
    void raw(void* data, std::size_t len) {
        in_.read(static_cast<char*>(data), static_cast<std::streamsize>(len));
        if (!in_) throw std::runtime_error("checkpoint: truncated file");
        hash_.feed(data, len);
    }
    void verify_checksum() {
        const std::uint64_t expected = hash_.h;
        unsigned char b[8];
        in_.read(reinterpret_cast<char*>(b), 8);
        if (!in_) throw std::runtime_error("checkpoint: missing checksum");
        std::uint64_t stored = 0;
        for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        if (stored != expected) throw std::runtime_error("checkpoint: checksum mismatch");
    }

private:
    std::ifstream in_;
    Fnv1a hash_;
};

inline constexpr char kCkptMagic[9] = "CETSPCK1";

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ParamBlock& params,
                            const std::map<std::string, double>& meta = {}) {
    detail::CkptWriter w(path);
    w.raw(detail::kCkptMagic, 8);
    w.u64(meta.size());
    for (const auto& [k, v] : meta) {
        w.str(k);
        w.f64(v);
    }
    w.u64(params.entries.size());
    for (const auto& [name, e] : params.entries) {
        w.str(name);
        w.u64(static_cast<std::uint64_t>(e.value.rows));
        w.u64(static_cast<std::uint64_t>(e.value.cols));
        for (double x : e.value.v) w.f64(x);
        for (double x : e.m.v) w.f64(x);
        for (double x : e.v.v) w.f64(x);
    }
    w.u64(static_cast<std::uint64_t>(params.step));
    w.finish();
}

inline ParamBlock load_checkpoint(const std::string& path, std::map<std::string, double>* meta_out = nullptr) {
    detail::CkptReader r(path);
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    const std::uint64_t nmeta = r.u64();
    for (std::uint64_t i = 0; i < nmeta; ++i) {
        std::string k = r.str();
        const double v = r.f64();
        if (meta_out) (*meta_out)[k] = v;
    }
    ParamBlock params;
    const std::uint64_t nblocks = r.u64();
    for (std::uint64_t i = 0; i < nblocks; ++i) {
        const std::string name = r.str();
        const int rows = static_cast<int>(r.u64());
        const int cols = static_cast<int>(r.u64());
        if (rows < 0 || cols < 0 || static_cast<std::uint64_t>(rows) * cols > (1ull << 28))
            throw std::runtime_error("checkpoint: implausible block shape for '" + name + "'");
        ParamEntry e{Tensor(rows, cols), Tensor(rows, cols), Tensor(rows, cols)};
        for (double& x : e.value.v) x = r.f64();
        for (double& x : e.m.v) x = r.f64();
        for (double& x : e.v.v) x = r.f64();
        params.entries.emplace(name, std::move(e));
    }
    params.step = static_cast<std::int64_t>(r.u64());
    r.verify_checksum();
    return params;
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
inline void init_uniform(Tensor& t, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(t.rows));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& x : t.v) x = dist(rng);
}

}  // namespace cetsp::diff
