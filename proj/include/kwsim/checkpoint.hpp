// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kwsim/model.hpp"

namespace kwsim {

class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& w) : std::runtime_error("checkpoint: " + w) {}
};

// One named tensor: quantized mantissas with their format, plain doubles
// (float-master training state), or packed sign bits.
struct TensorRecord {
    enum Kind : uint8_t { i32 = 0, f64 = 1, u64 = 2 };
    Kind kind = i32;
    QFormat fmt{};            // meaningful for kind == i32
    std::vector<int> shape;
    std::vector<int32_t> vi;
    std::vector<double> vf;
    std::vector<uint64_t> vu;

    size_t count() const {
        size_t n = 1;
        for (int d : shape) n *= size_t(d);
        return n;
    }
};

// Named-tensor archive with a versioned, fully little-endian byte layout.
// Entries serialize in name order, so equal content gives equal bytes.
class Archive {
public:
    static constexpr char kMagic[8] = {'K', 'W', 'S', 'A', 'R', 'C', 'H', '1'};

    std::map<std::string, TensorRecord> entries;

    bool has(const std::string& name) const { return entries.count(name) > 0; }

    void put_i32(const std::string& name, QFormat fmt, std::vector<int> shape,
                 std::vector<int32_t> v) {
        TensorRecord r;
        r.kind = TensorRecord::i32;
        r.fmt = fmt;
        r.shape = std::move(shape);
        r.vi = std::move(v);
        check_count(name, r, r.vi.size());
        entries[name] = std::move(r);
    }
    void put_f64(const std::string& name, std::vector<int> shape, std::vector<double> v) {
        TensorRecord r;
        r.kind = TensorRecord::f64;
        r.shape = std::move(shape);
        r.vf = std::move(v);
        check_count(name, r, r.vf.size());
        entries[name] = std::move(r);
    }
    void put_u64(const std::string& name, std::vector<int> shape, std::vector<uint64_t> v) {
        TensorRecord r;
        r.kind = TensorRecord::u64;
        r.shape = std::move(shape);
        r.vu = std::move(v);
        entries[name] = std::move(r); // word count is layout-dependent, not shape product
    }
    void put_scalar(const std::string& name, int32_t v) {
        put_i32(name, QFormat{0, 0}, {1}, {v});
    }
    void put_scalar_f(const std::string& name, double v) { put_f64(name, {1}, {v}); }

    const TensorRecord& get(const std::string& name, TensorRecord::Kind kind) const {
        auto it = entries.find(name);
        if (it == entries.end()) throw CheckpointError("missing entry: " + name);
        if (it->second.kind != kind) throw CheckpointError("wrong kind for entry: " + name);
        return it->second;
    }
    int32_t scalar(const std::string& name) const {
        const auto& r = get(name, TensorRecord::i32);
        if (r.vi.size() != 1) throw CheckpointError("not a scalar: " + name);
        return r.vi[0];
    }
    double scalar_f(const std::string& name) const {
        const auto& r = get(name, TensorRecord::f64);
        if (r.vf.size() != 1) throw CheckpointError("not a scalar: " + name);
        return r.vf[0];
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw CheckpointError("cannot write " + path.string());
        f.write(kMagic, 8);
        w32(f, uint32_t(entries.size()));
        for (const auto& [name, r] : entries) {
            if (name.size() > 0xFFFF) throw CheckpointError("entry name too long");
            w16(f, uint16_t(name.size()));
            f.write(name.data(), std::streamsize(name.size()));
            f.put(char(r.kind));
            f.put(char(r.fmt.int_bits));
            f.put(char(r.fmt.frac_bits));
            f.put(char(r.shape.size()));
            for (int d : r.shape) w32(f, uint32_t(d));
            switch (r.kind) {
                case TensorRecord::i32:
                    w64(f, r.vi.size());
                    for (int32_t v : r.vi) w32(f, uint32_t(v));
                    break;
                case TensorRecord::f64:
                    w64(f, r.vf.size());
                    for (double v : r.vf) {
                        uint64_t u;
                        std::memcpy(&u, &v, 8);
                        w64(f, u);
                    }
                    break;
                case TensorRecord::u64:
                    w64(f, r.vu.size());
                    for (uint64_t v : r.vu) w64(f, v);
                    break;
            }
        }
        if (!f) throw CheckpointError("write failed: " + path.string());
    }

    static Archive load(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw CheckpointError("cannot open " + path.string());
        char magic[8];
        f.read(magic, 8);
        if (!f || std::memcmp(magic, kMagic, 8) != 0)
            throw CheckpointError("bad magic in " + path.string());
        Archive a;
        const uint32_t n = r32(f);
        for (uint32_t i = 0; i < n; ++i) {
            const uint16_t nl = r16(f);
            std::string name(nl, '\0');
            f.read(name.data(), nl);
            TensorRecord r;
            r.kind = TensorRecord::Kind(rbyte(f));
            r.fmt.int_bits = rbyte(f);
            r.fmt.frac_bits = rbyte(f);
            const int nd = rbyte(f);
            r.shape.resize(size_t(nd));
            for (int d = 0; d < nd; ++d) r.shape[size_t(d)] = int(r32(f));
            const uint64_t cnt = r64(f);
            switch (r.kind) {
                case TensorRecord::i32:
                    r.vi.resize(cnt);
                    for (auto& v : r.vi) v = int32_t(r32(f));
                    break;
                case TensorRecord::f64:
                    r.vf.resize(cnt);
                    for (auto& v : r.vf) {
                        const uint64_t u = r64(f);
                        std::memcpy(&v, &u, 8);
                    }
                    break;
                case TensorRecord::u64:
                    r.vu.resize(cnt);
                    for (auto& v : r.vu) v = r64(f);
                    break;
                default:
                    throw CheckpointError("unknown tensor kind in " + path.string());
            }
            if (!f) throw CheckpointError("truncated file: " + path.string());
            a.entries[name] = std::move(r);
        }
        return a;
    }

    // Human-readable sidecar content: one line per entry.
    std::string summary() const {
        std::ostringstream os;
        os << "entry\tkind\tformat\tshape\tcount\n";
        for (const auto& [name, r] : entries) {
            os << name << '\t';
            os << (r.kind == TensorRecord::i32 ? "q16" : r.kind == TensorRecord::f64 ? "f64" : "bits");
            os << '\t';
            if (r.kind == TensorRecord::i32)
                os << r.fmt.to_string();
            else
                os << "-";
            os << '\t';
            for (size_t i = 0; i < r.shape.size(); ++i) os << (i ? "x" : "") << r.shape[i];
            os << '\t'
               << (r.kind == TensorRecord::i32 ? r.vi.size()
                                               : r.kind == TensorRecord::f64 ? r.vf.size()
                                                                             : r.vu.size())
               << '\n';
        }
        return os.str();
    }

private:
    static void check_count(const std::string& name, const TensorRecord& r, size_t got) {
        if (r.count() != got) throw CheckpointError("shape/data mismatch for " + name);
    }
    static void w16(std::ofstream& f, uint16_t v) {
        char b[2] = {char(v & 0xFF), char(v >> 8)};
        f.write(b, 2);
    }
    static void w32(std::ofstream& f, uint32_t v) {
        char b[4] = {char(v & 0xFF), char((v >> 8) & 0xFF), char((v >> 16) & 0xFF),
                     char((v >> 24) & 0xFF)};
        f.write(b, 4);
    }
    static void w64(std::ofstream& f, uint64_t v) {
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
        f.write(b, 8);
    }
    static uint8_t rbyte(std::ifstream& f) { return uint8_t(f.get()); }
    static uint16_t r16(std::ifstream& f) {
        unsigned char b[2];
        f.read(reinterpret_cast<char*>(b), 2);
        return uint16_t(b[0] | (b[1] << 8));
    }
    static uint32_t r32(std::ifstream& f) {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
    }
    static uint64_t r64(std::ifstream& f) {
        unsigned char b[8];
        f.read(reinterpret_cast<char*>(b), 8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
        return v;
    }
};

// ===== Model <-> archive ====================================================

inline void save_model(const ModelSpec& m, Archive& a) {
    a.put_scalar("model.version", 1);
    a.put_scalar("model.sample_rate", m.sample_rate);
    a.put_scalar("model.input_len", m.input_len);
    a.put_scalar("model.num_classes", m.num_classes);
    a.put_scalar("model.level", int32_t(m.level));
    a.put_scalar("model.mapping", int32_t(m.mapping));

    a.put_scalar("model.sinc.num_filters", m.sinc.num_filters);
    a.put_scalar("model.sinc.kernel_size", m.sinc.kernel_size);
    a.put_scalar("model.sinc.pool", m.sinc.pool);
    a.put_f64("model.sinc.low_hz", {m.sinc.num_filters}, m.sinc.low_hz);
    a.put_f64("model.sinc.band_hz", {m.sinc.num_filters}, m.sinc.band_hz);
    a.put_i32("model.sinc.bias", QFormat{0, 0}, {m.sinc.num_filters}, m.sinc.bias);
    a.put_u64("model.sinc.kernels", {m.sinc.kernels.rows(), m.sinc.kernels.cols()},
              std::vector<uint64_t>(m.sinc.kernels.words().begin(), m.sinc.kernels.words().end()));

    a.put_scalar("model.blocks.count", int32_t(m.blocks.size()));
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        const ConvBlockSpec& b = m.blocks[i];
        const std::string p = "model.block" + std::to_string(i) + ".";
        a.put_scalar(p + "out_channels", b.out_channels);
        a.put_scalar(p + "kernel", b.kernel);
        a.put_scalar(p + "pool", b.pool);
        a.put_scalar(p + "groups", b.groups);
        a.put_u64(p + "weights", {b.weights.rows(), b.weights.cols()},
                  std::vector<uint64_t>(b.weights.words().begin(), b.weights.words().end()));
        a.put_i32(p + "bn_bias", QFormat{0, 0}, {b.out_channels}, b.bn_bias);
        std::vector<int32_t> pol(b.polarity.begin(), b.polarity.end());
        a.put_i32(p + "polarity", QFormat{0, 0}, {b.out_channels}, pol);
        a.put_i32(p + "act_offset", QFormat{0, 0}, {b.out_channels}, b.act_offset);
    }

    a.put_i32("model.classifier.W", m.classifier.W.fmt(), m.classifier.W.shape(),
              m.classifier.W.raws());
    a.put_i32("model.classifier.b", m.classifier.b.fmt(), m.classifier.b.shape(),
              m.classifier.b.raws());
}

inline ModelSpec load_model(const Archive& a) {
    ModelSpec m;
    if (a.scalar("model.version") != 1) throw CheckpointError("unsupported model version");
    m.sample_rate = a.scalar("model.sample_rate");
    m.input_len = a.scalar("model.input_len");
    m.num_classes = a.scalar("model.num_classes");
    m.level = ConstraintLevel(a.scalar("model.level"));
    m.mapping = BiasMapMethod(a.scalar("model.mapping"));

    m.sinc.num_filters = a.scalar("model.sinc.num_filters");
    m.sinc.kernel_size = a.scalar("model.sinc.kernel_size");
    m.sinc.pool = a.scalar("model.sinc.pool");
    m.sinc.low_hz = a.get("model.sinc.low_hz", TensorRecord::f64).vf;
    m.sinc.band_hz = a.get("model.sinc.band_hz", TensorRecord::f64).vf;
    m.sinc.bias = a.get("model.sinc.bias", TensorRecord::i32).vi;
    {
        const auto& r = a.get("model.sinc.kernels", TensorRecord::u64);
        m.sinc.kernels = BinTensor(r.shape.at(0), r.shape.at(1));
        if (r.vu.size() != m.sinc.kernels.words().size())
            throw CheckpointError("sinc kernel word count mismatch");
        std::copy(r.vu.begin(), r.vu.end(), m.sinc.kernels.words().begin());
    }

    const int nb = a.scalar("model.blocks.count");
    for (int i = 0; i < nb; ++i) {
        const std::string p = "model.block" + std::to_string(i) + ".";
        ConvBlockSpec b;
        b.out_channels = a.scalar(p + "out_channels");
        b.kernel = a.scalar(p + "kernel");
        b.pool = a.scalar(p + "pool");
        b.groups = a.scalar(p + "groups");
        const auto& w = a.get(p + "weights", TensorRecord::u64);
        b.weights = BinTensor(w.shape.at(0), w.shape.at(1));
        if (w.vu.size() != b.weights.words().size())
            throw CheckpointError("block weight word count mismatch");
        std::copy(w.vu.begin(), w.vu.end(), b.weights.words().begin());
        b.bn_bias = a.get(p + "bn_bias", TensorRecord::i32).vi;
        const auto& pol = a.get(p + "polarity", TensorRecord::i32).vi;
        b.polarity.assign(pol.size(), 0);
        for (size_t j = 0; j < pol.size(); ++j) b.polarity[j] = int8_t(pol[j]);
        b.act_offset = a.get(p + "act_offset", TensorRecord::i32).vi;
        m.blocks.push_back(std::move(b));
    }

    auto load_q = [&](const std::string& name) {
        const auto& r = a.get(name, TensorRecord::i32);
        QTensor t(r.shape, r.fmt);
        t.raws() = r.vi;
        return t;
    };
    m.classifier.W = load_q("model.classifier.W");
    m.classifier.b = load_q("model.classifier.b");
    return m;
}

inline void save_checkpoint(const ModelSpec& m, const std::filesystem::path& path) {
    Archive a;
    save_model(m, a);
    a.save(path);
    std::ofstream side(path.string() + ".txt");
    side << a.summary();
}

inline ModelSpec load_checkpoint(const std::filesystem::path& path) {
    return load_model(Archive::load(path));
}

} // namespace kwsim
