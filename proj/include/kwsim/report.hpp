// SPDX-License-Identifier: Apache-2.0
//
// Report plumbing for the experiment drivers: tab-separated tables with
// deterministic number formatting, content hashing, and a run manifest that
// records the command, seed, configuration snapshot, and output hashes —
// everything needed to verify a rerun byte for byte. Nothing here depends on
// wall-clock time.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kwsim/config.hpp"

namespace kwsim {

class ReportError : public std::runtime_error {
public:
    explicit ReportError(const std::string& w) : std::runtime_error(w) {}
};

// Fixed-precision decimal for table cells (accuracies, sigmas): stable bytes
// for equal doubles, pleasant to read.
inline std::string format_fixed(double v, int places = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", places, v);
    return std::string(buf);
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add_row(std::vector<std::string> cells) {
        if (cells.size() != header.size())
            throw ReportError("table row has " + std::to_string(cells.size()) +
                              " cells, header has " + std::to_string(header.size()));
        rows.push_back(std::move(cells));
    }

    std::string tsv() const {
        std::ostringstream o;
        for (size_t i = 0; i < header.size(); ++i) o << (i ? "\t" : "") << header[i];
        o << "\n";
        for (const auto& row : rows) {
            for (size_t i = 0; i < row.size(); ++i) o << (i ? "\t" : "") << row[i];
            o << "\n";
        }
        return o.str();
    }
};

// FNV-1a: tiny, dependency-free content fingerprint for the manifests.
inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= uint64_t(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hash_hex(std::string_view s) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(s)));
    return std::string(buf);
}

inline void write_text_file(const std::filesystem::path& path, std::string_view content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ReportError("cannot open for writing: " + path.string());
    out.write(content.data(), std::streamsize(content.size()));
    if (!out) throw ReportError("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ReportError("cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// One manifest per run: every output file's content hash plus the exact
// configuration, so two runs can be compared without keeping the outputs.
struct RunManifest {
    std::string command;
    uint64_t seed = 0;
    std::string config_snapshot;
    std::vector<std::pair<std::string, std::string>> outputs; // (file name, content hash)

    void record(const std::string& name, std::string_view content) {
        outputs.emplace_back(name, hash_hex(content));
    }

    std::string text() const {
        std::ostringstream o;
        o << "command = " << command << "\n";
        o << "seed = " << seed << "\n";
        for (const auto& [name, hash] : outputs) o << "output " << name << " = " << hash << "\n";
        o << "config:\n" << config_snapshot;
        return o.str();
    }
};

// Write one report file into the run directory and record it in the manifest.
inline void emit_report(const std::filesystem::path& out_dir, const std::string& name,
                        std::string_view content, RunManifest& manifest) {
    write_text_file(out_dir / name, content);
    manifest.record(name, content);
}

} // namespace kwsim
