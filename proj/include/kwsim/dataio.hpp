// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "kwsim/fixedpoint.hpp"
#include "kwsim/rng.hpp"
#include "kwsim/tensor.hpp"

namespace kwsim {

class MalformedWav : public std::runtime_error {
public:
    explicit MalformedWav(const std::string& w) : std::runtime_error("malformed wav: " + w) {}
};
class MissingKeywordDir : public std::runtime_error {
public:
    explicit MissingKeywordDir(const std::string& kw)
        : std::runtime_error("missing or empty keyword directory: " + kw) {}
};
class InsufficientUtterances : public std::runtime_error {
public:
    explicit InsufficientUtterances(const std::string& cell)
        : std::runtime_error("not enough utterances in cell: " + cell) {}
};

// 64-bit FNV-1a; used for content hashes in manifests and split decisions.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}
inline uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }
inline uint64_t hash_samples(std::span<const int16_t> s) {
    return fnv1a(s.data(), s.size() * sizeof(int16_t));
}

struct Utterance {
    std::vector<int16_t> samples; // exactly `rate` samples after loading
    int rate = 16000;
    std::string label;
    std::string speaker;
    std::string path; // relative to the dataset root
};

// ===== WAV I/O (strict: RIFF, 16-bit mono PCM at the expected rate) =========

namespace detail {
inline uint32_t rd_u32(const unsigned char* p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}
inline uint16_t rd_u16(const unsigned char* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }
} // namespace detail

inline std::vector<int16_t> read_wav(const std::filesystem::path& path, int expected_rate = 16000) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MalformedWav("cannot open " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 44) throw MalformedWav("file too short");
    if (std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
        throw MalformedWav("not a RIFF/WAVE file");

    bool have_fmt = false;
    size_t data_off = 0, data_len = 0;
    for (size_t off = 12; off + 8 <= buf.size();) {
        const std::string id(reinterpret_cast<const char*>(buf.data() + off), 4);
        const uint32_t len = detail::rd_u32(buf.data() + off + 4);
        const size_t body = off + 8;
        if (body + len > buf.size()) throw MalformedWav("chunk overruns file");
        if (id == "fmt ") {
            if (len < 16) throw MalformedWav("fmt chunk too short");
            const uint16_t fmt = detail::rd_u16(buf.data() + body);
            const uint16_t ch = detail::rd_u16(buf.data() + body + 2);
            const uint32_t rate = detail::rd_u32(buf.data() + body + 4);
            const uint16_t bits = detail::rd_u16(buf.data() + body + 14);
            if (fmt != 1) throw MalformedWav("not integer PCM");
            if (ch != 1) throw MalformedWav("not mono");
            if (bits != 16) throw MalformedWav("not 16-bit");
            if (int(rate) != expected_rate)
                throw MalformedWav("sample rate != " + std::to_string(expected_rate));
            have_fmt = true;
        } else if (id == "data") {
            data_off = body;
            data_len = len;
        }
        off = body + len + (len & 1); // chunks are word-aligned
    }
    if (!have_fmt) throw MalformedWav("no fmt chunk");
    if (data_off == 0) throw MalformedWav("no data chunk");
    if (data_len % 2) throw MalformedWav("odd data length");
    std::vector<int16_t> out(data_len / 2);
    for (size_t i = 0; i < out.size(); ++i) {
        const uint16_t u = detail::rd_u16(buf.data() + data_off + 2 * i);
        out[i] = int16_t(u);
    }
    return out;
}

inline void write_wav(const std::filesystem::path& path, std::span<const int16_t> samples,
                      int rate = 16000) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    auto u32 = [&](uint32_t v) {
        unsigned char b[4] = {(unsigned char)(v), (unsigned char)(v >> 8), (unsigned char)(v >> 16),
                              (unsigned char)(v >> 24)};
        f.write(reinterpret_cast<char*>(b), 4);
    };
    auto u16 = [&](uint16_t v) {
        unsigned char b[2] = {(unsigned char)(v), (unsigned char)(v >> 8)};
        f.write(reinterpret_cast<char*>(b), 2);
    };
    const uint32_t dlen = uint32_t(samples.size() * 2);
    f.write("RIFF", 4);
    u32(36 + dlen);
    f.write("WAVE", 4);
    f.write("fmt ", 4);
    u32(16);
    u16(1); // PCM
    u16(1); // mono
    u32(uint32_t(rate));
    u32(uint32_t(rate) * 2); // byte rate
    u16(2);                  // block align
    u16(16);                 // bits
    f.write("data", 4);
    u32(dlen);
    for (int16_t s : samples) u16(uint16_t(s));
}

// Enforce the utterance duration contract: within [0.5 s, 1.5 s], then
// head-preserving zero-pad or truncate to exactly one second.
inline std::vector<int16_t> fit_duration(std::vector<int16_t> s, int rate) {
    const size_t lo = size_t(rate) / 2, hi = size_t(rate) * 3 / 2;
    if (s.size() < lo || s.size() > hi)
        throw MalformedWav("duration outside [0.5 s, 1.5 s]: " + std::to_string(s.size()) +
                           " samples");
    s.resize(size_t(rate), 0);
    return s;
}

// ===== 8-bit conversion =====================================================

// Peak-normalize to the activation format's full scale, so the loudest sample
// lands on the maximum raw mantissa. Silence is flagged and left at zero.
inline QTensor to_8bit(const Utterance& u, bool* silent = nullptr) {
    QTensor out({int(u.samples.size())}, kActivationFmt);
    int16_t peak = 0;
    for (int16_t s : u.samples) peak = std::max<int16_t>(peak, int16_t(std::abs(int(s))));
    if (silent) *silent = (peak == 0);
    if (peak == 0) return out;
    const double scale = kActivationFmt.max_value() / double(peak);
    for (size_t i = 0; i < u.samples.size(); ++i)
        out.raw(i) = quantize(double(u.samples[i]) * scale, kActivationFmt).raw;
    return out;
}

// ===== Augmentation =========================================================

// Deterministic core: add Gaussian noise of the given full-scale sigma, then
// shift by the given sample count with zero fill (positive = delay).
inline Utterance augment_with(const Utterance& u, double noise_sigma, int shift,
                              RngStream& rng) {
    Utterance out = u;
    const int n = int(u.samples.size());
    if (noise_sigma > 0.0) {
        for (int i = 0; i < n; ++i) {
            const double v = double(u.samples[size_t(i)]) +
                             noise_sigma * 32768.0 * rng.next_gaussian();
            out.samples[size_t(i)] =
                int16_t(std::clamp(std::lround(v), long(-32768), long(32767)));
        }
    }
    if (shift != 0) {
        std::vector<int16_t> shifted(size_t(n), 0);
        for (int i = 0; i < n; ++i) {
            const int src = i - shift;
            if (src >= 0 && src < n) shifted[size_t(i)] = out.samples[size_t(src)];
        }
        out.samples = std::move(shifted);
    }
    return out;
}

// Random augmentation: sigma ~ U[0.001, 0.015] of full scale, shift ~ U[-0.5 s, +0.5 s].
inline Utterance augment(const Utterance& u, RngStream& rng) {
    const double sigma = rng.uniform(0.001, 0.015);
    const int shift = int(rng.uniform_int(-int64_t(u.rate) / 2, int64_t(u.rate) / 2));
    return augment_with(u, sigma, shift, rng);
}

// ===== Datasets =============================================================

struct Dataset {
    std::vector<Utterance> train;
    std::vector<Utterance> test;
    std::vector<std::string> keywords; // index = class id

    int label_of(const std::string& kw) const {
        for (size_t i = 0; i < keywords.size(); ++i)
            if (keywords[i] == kw) return int(i);
        return -1;
    }
};

inline const std::vector<std::string>& default_keywords() {
    static const std::vector<std::string> kw = {"yes", "no",    "up",   "down", "left",
                                                "right", "stop", "go",   "on",   "off"};
    return kw;
}

namespace detail {

inline std::vector<std::filesystem::path> sorted_wavs(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    if (!std::filesystem::is_directory(dir)) return out;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".wav") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline std::string speaker_of(const std::string& filename) {
    const auto us = filename.find('_');
    return us == std::string::npos ? filename : filename.substr(0, us);
}

inline Utterance load_utterance(const std::filesystem::path& file, const std::string& rel,
                                const std::string& label, const std::string& speaker, int rate) {
    Utterance u;
    u.samples = fit_duration(read_wav(file, rate), rate);
    u.rate = rate;
    u.label = label;
    u.speaker = speaker;
    u.path = rel;
    return u;
}

} // namespace detail

// Directory-per-keyword tree. If `root/testing_list.txt` exists, its entries
// (keyword/filename.wav) form the test split; otherwise a seeded, path-keyed
// 80/20 split is applied. Enumeration is sorted, so loading is deterministic.
inline Dataset load_gscd(const std::filesystem::path& root,
                         const std::vector<std::string>& keywords, uint64_t seed = 0,
                         int rate = 16000) {
    Dataset ds;
    ds.keywords = keywords;

    std::map<std::string, bool> test_list;
    bool have_list = false;
    {
        std::ifstream f(root / "testing_list.txt");
        if (f) {
            have_list = true;
            std::string line;
            while (std::getline(f, line)) {
                while (!line.empty() && (line.back() == '\r' || line.back() == '\n'))
                    line.pop_back();
                if (!line.empty()) test_list[line] = true;
            }
        }
    }

    for (const std::string& kw : keywords) {
        auto files = detail::sorted_wavs(root / kw);
        if (files.empty()) throw MissingKeywordDir(kw);
        for (const auto& file : files) {
            const std::string rel = kw + "/" + file.filename().string();
            Utterance u = detail::load_utterance(file, rel, kw,
                                                 detail::speaker_of(file.filename().string()), rate);
            bool is_test;
            if (have_list) {
                is_test = test_list.count(rel) > 0;
            } else {
                RngStream h = RngStream::derive(seed, {0x73706c74ull, fnv1a(rel)});
                is_test = (h.next_u64() % 100) < 20;
            }
            (is_test ? ds.test : ds.train).push_back(std::move(u));
        }
    }
    return ds;
}

// Personal tree: root/speaker/keyword/*.wav. Picks `per_cell_train` utterances
// per (speaker, keyword) cell for training (seeded), the rest for test.
inline Dataset build_personal_split(const std::filesystem::path& root,
                                    const std::vector<std::string>& keywords,
                                    int per_cell_train = 3, uint64_t seed = 0, int rate = 16000) {
    Dataset ds;
    ds.keywords = keywords;
    std::vector<std::string> speakers;
    if (std::filesystem::is_directory(root))
        for (const auto& e : std::filesystem::directory_iterator(root))
            if (e.is_directory()) speakers.push_back(e.path().filename().string());
    std::sort(speakers.begin(), speakers.end());
    if (speakers.empty()) throw InsufficientUtterances("no speaker directories under " + root.string());

    for (const std::string& spk : speakers) {
        for (const std::string& kw : keywords) {
            auto files = detail::sorted_wavs(root / spk / kw);
            if (int(files.size()) < per_cell_train + 1)
                throw InsufficientUtterances(spk + "/" + kw);
            std::vector<size_t> order(files.size());
            for (size_t i = 0; i < order.size(); ++i) order[i] = i;
            RngStream r = RngStream::derive(seed, {0x70657273ull, fnv1a(spk), fnv1a(kw)});
            for (size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[size_t(r.uniform_int(0, int64_t(i) - 1))]);
            for (size_t i = 0; i < order.size(); ++i) {
                const auto& file = files[order[i]];
                const std::string rel = spk + "/" + kw + "/" + file.filename().string();
                Utterance u = detail::load_utterance(file, rel, kw, spk, rate);
                (int(i) < per_cell_train ? ds.train : ds.test).push_back(std::move(u));
            }
        }
    }
    // Deterministic order regardless of selection order.
    auto by_path = [](const Utterance& a, const Utterance& b) { return a.path < b.path; };
    std::sort(ds.train.begin(), ds.train.end(), by_path);
    std::sort(ds.test.begin(), ds.test.end(), by_path);
    return ds;
}

// One record per utterance: split, relative path, label, speaker, content hash.
inline std::string dataset_manifest(const Dataset& ds) {
    std::ostringstream os;
    os << "split\tpath\tlabel\tspeaker\tsamples_fnv1a\n";
    auto emit = [&](const char* split, const std::vector<Utterance>& v) {
        for (const auto& u : v)
            os << split << '\t' << u.path << '\t' << u.label << '\t' << u.speaker << '\t'
               << std::hex << hash_samples(u.samples) << std::dec << '\n';
    };
    emit("train", ds.train);
    emit("test", ds.test);
    return os.str();
}

} // namespace kwsim
