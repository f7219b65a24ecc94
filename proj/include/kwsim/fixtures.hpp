// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "kwsim/dataio.hpp"
#include "kwsim/rng.hpp"

namespace kwsim {

// Synthetic pseudo-keyword audio: each keyword is a harmonic tone burst at a
// keyword-specific fundamental, each speaker applies a small pitch multiplier,
// and every utterance gets its own noise and envelope jitter. The frequencies
// sit inside the band-pass front end's coverage so the classes are separable,
// letting the whole test suite run without downloading any real dataset.
struct FixtureConfig {
    std::filesystem::path root;
    std::vector<std::string> keywords = default_keywords();
    int rate = 16000;
    int speakers = 3;
    int files_per_keyword = 20;  // flat (directory-per-keyword) tree
    int files_per_cell = 4;      // personal tree, per (speaker, keyword)
    uint64_t seed = 1;
};

namespace detail {

inline double fixture_fundamental(int keyword_index) {
    return 1500.0 + 450.0 * double(keyword_index);
}
inline double fixture_pitch(int speaker_index) { return 0.96 + 0.04 * double(speaker_index); }

inline std::vector<int16_t> fixture_tone(int rate, int keyword_index, int speaker_index,
                                         RngStream& rng) {
    const double f0 = fixture_fundamental(keyword_index) * fixture_pitch(speaker_index);
    const double start = 0.08 + 0.04 * rng.next_double();
    const double stop = 0.88 + 0.08 * rng.next_double();
    const double amp = 0.55 + 0.15 * rng.next_double();
    const double h2 = 0.25 + 0.15 * rng.next_double(); // 2nd harmonic mix
    const double noise = 0.004 + 0.006 * rng.next_double();
    const double phase = 2.0 * std::numbers::pi * rng.next_double();
    std::vector<int16_t> s(size_t(rate), 0);
    for (int i = 0; i < rate; ++i) {
        const double t = double(i) / double(rate);
        double v = noise * rng.next_gaussian();
        if (t >= start && t < stop) {
            // Raised-cosine attack/release so the burst has no clicks.
            const double edge = 0.02;
            double env = 1.0;
            if (t < start + edge) env = 0.5 - 0.5 * std::cos(std::numbers::pi * (t - start) / edge);
            if (t > stop - edge) env = 0.5 - 0.5 * std::cos(std::numbers::pi * (stop - t) / edge);
            const double w = 2.0 * std::numbers::pi * f0 * t + phase;
            v += amp * env * (std::sin(w) + h2 * std::sin(2.0 * w));
        }
        s[size_t(i)] = int16_t(std::clamp(std::lround(v * 32767.0), long(-32768), long(32767)));
    }
    return s;
}

} // namespace detail

// Directory-per-keyword tree (speaker encoded in the filename prefix).
inline void generate_gscd_fixture(const FixtureConfig& cfg) {
    namespace fs = std::filesystem;
    for (size_t k = 0; k < cfg.keywords.size(); ++k) {
        const fs::path dir = cfg.root / cfg.keywords[k];
        fs::create_directories(dir);
        for (int i = 0; i < cfg.files_per_keyword; ++i) {
            const int spk = i % cfg.speakers;
            RngStream rng = RngStream::derive(cfg.seed, {0x67736364ull, uint64_t(k), uint64_t(i)});
            auto s = detail::fixture_tone(cfg.rate, int(k), spk, rng);
            char name[64];
            std::snprintf(name, sizeof name, "spk%02d_nohash_%d.wav", spk, i);
            write_wav(dir / name, s, cfg.rate);
        }
    }
}

// Personal tree: root/personNN/keyword/NN.wav.
inline void generate_personal_fixture(const FixtureConfig& cfg) {
    namespace fs = std::filesystem;
    for (int spk = 0; spk < cfg.speakers; ++spk) {
        char pname[32];
        std::snprintf(pname, sizeof pname, "person%02d", spk);
        for (size_t k = 0; k < cfg.keywords.size(); ++k) {
            const fs::path dir = cfg.root / pname / cfg.keywords[k];
            fs::create_directories(dir);
            for (int i = 0; i < cfg.files_per_cell; ++i) {
                RngStream rng = RngStream::derive(
                    cfg.seed, {0x70657273ull, uint64_t(spk), uint64_t(k), uint64_t(i)});
                auto s = detail::fixture_tone(cfg.rate, int(k), spk, rng);
                char name[32];
                std::snprintf(name, sizeof name, "%02d.wav", i);
                write_wav(dir / name, s, cfg.rate);
            }
        }
    }
}

} // namespace kwsim
