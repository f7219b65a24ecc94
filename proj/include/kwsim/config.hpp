// SPDX-License-Identifier: Apache-2.0
//
// Structured-text experiment configuration: a small INI dialect (sections,
// `key = value` pairs, `#`/`;` comments) parsed into the typed settings the
// pipeline drivers consume, plus a canonical snapshot serializer so run
// manifests can embed the exact configuration and round-trip it byte for byte.
#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "kwsim/compensate.hpp"
#include "kwsim/dataio.hpp"
#include "kwsim/imcsim.hpp"
#include "kwsim/model.hpp"
#include "kwsim/train_offline.hpp"
#include "kwsim/trainer.hpp"

namespace kwsim {

// ConfigError (train_offline.hpp) doubles as this module's failure type.

namespace detail {

inline std::string trim(std::string_view s) {
    size_t a = 0, b = s.size();
    while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
    while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
    return std::string(s.substr(a, b - a));
}

inline std::string lower(std::string s) {
    for (char& c : s)
        if (c >= 'A' && c <= 'Z') c = char(c - 'A' + 'a');
    return s;
}

// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

} // namespace detail

// Parsed key/value sections; values stay raw strings until a typed getter.
struct ConfigFile {
    std::map<std::string, std::map<std::string, std::string>> sections;

    static ConfigFile parse_text(const std::string& text) {
        ConfigFile cf;
        std::string section;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = detail::trim(line);
            if (t.empty() || t[0] == '#' || t[0] == ';') continue;
            if (t.front() == '[') {
                if (t.back() != ']' || t.size() < 3)
                    throw ConfigError("config line " + std::to_string(lineno) +
                                      ": malformed section header '" + t + "'");
                section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
                if (section.empty())
                    throw ConfigError("config line " + std::to_string(lineno) +
                                      ": empty section name");
                cf.sections[section]; // a section may legitimately stay empty
                continue;
            }
            const size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) +
                                  ": expected 'key = value', got '" + t + "'");
            const std::string key = detail::trim(std::string_view(t).substr(0, eq));
            const std::string val = detail::trim(std::string_view(t).substr(eq + 1));
            if (key.empty())
                throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            cf.sections[section][key] = val;
        }
        return cf;
    }

    static ConfigFile load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open config file: " + path.string());
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse_text(ss.str());
    }

    bool has(const std::string& section, const std::string& key) const {
        const auto s = sections.find(section);
        return s != sections.end() && s->second.count(key) > 0;
    }

    std::string get(const std::string& section, const std::string& key,
                    const std::string& def) const {
        const auto s = sections.find(section);
        if (s == sections.end()) return def;
        const auto k = s->second.find(key);
        return k == s->second.end() ? def : k->second;
    }

    int64_t get_int(const std::string& section, const std::string& key, int64_t def) const {
        if (!has(section, key)) return def;
        const std::string v = get(section, key, "");
        int64_t out = 0;
        const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
        if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
            throw ConfigError("config " + section + "." + key + ": '" + v +
                              "' is not an integer");
        return out;
    }

    double get_double(const std::string& section, const std::string& key, double def) const {
        if (!has(section, key)) return def;
        const std::string v = get(section, key, "");
        double out = 0.0;
        const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
        if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
            throw ConfigError("config " + section + "." + key + ": '" + v + "' is not a number");
        return out;
    }

    bool get_bool(const std::string& section, const std::string& key, bool def) const {
        if (!has(section, key)) return def;
        const std::string v = detail::lower(get(section, key, ""));
        if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
        if (v == "false" || v == "no" || v == "off" || v == "0") return false;
        throw ConfigError("config " + section + "." + key + ": '" + v + "' is not a boolean");
    }

    std::vector<std::string> get_list(const std::string& section, const std::string& key,
                                      const std::vector<std::string>& def) const {
        if (!has(section, key)) return def;
        std::vector<std::string> out;
        const std::string v = get(section, key, "");
        size_t start = 0;
        while (start <= v.size()) {
            const size_t comma = v.find(',', start);
            const size_t end = comma == std::string::npos ? v.size() : comma;
            const std::string item = detail::trim(std::string_view(v).substr(start, end - start));
            if (!item.empty()) out.push_back(item);
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return out;
    }

    std::vector<int> get_int_list(const std::string& section, const std::string& key,
                                  const std::vector<int>& def) const {
        if (!has(section, key)) return def;
        std::vector<int> out;
        for (const std::string& item : get_list(section, key, {})) {
            int v = 0;
            const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
            if (res.ec != std::errc{} || res.ptr != item.data() + item.size())
                throw ConfigError("config " + section + "." + key + ": '" + item +
                                  "' is not an integer");
            out.push_back(v);
        }
        return out;
    }
};

// ===== Typed experiment settings ============================================

struct DataConfig {
    std::string root;          // directory-per-keyword corpus
    std::string personal_root; // person/keyword tree for on-chip customization
    std::vector<std::string> keywords = default_keywords();
    int train_per_cell = 3;    // personal-split utterances per (speaker, keyword)
    uint64_t split_seed = 0;   // train/test partition key, independent of run seeds
};

inline const char* to_string(ErrorScaling s) {
    switch (s) {
        case ErrorScaling::off: return "off";
        case ErrorScaling::software: return "software";
        case ErrorScaling::hardware: return "hardware";
    }
    return "?";
}

inline ErrorScaling scaling_from_string(const std::string& s) {
    if (s == "off") return ErrorScaling::off;
    if (s == "software") return ErrorScaling::software;
    if (s == "hardware") return ErrorScaling::hardware;
    throw ConfigError("unknown error-scaling mode '" + s + "'");
}

inline BiasMapMethod mapping_from_string(const std::string& s) {
    if (s == "add") return BiasMapMethod::add;
    if (s == "absolute_add") return BiasMapMethod::absolute_add;
    if (s == "sub") return BiasMapMethod::sub;
    if (s == "absolute_sub") return BiasMapMethod::absolute_sub;
    throw ConfigError("unknown bias mapping method '" + s + "'");
}

// Every tunable in one place, defaulting to the reference architecture and
// the documented training/customization settings.
struct ExperimentConfig {
    DataConfig data;
    ArchConfig arch;
    TrainHyper train;
    NoiseModel noise;
    CustomizeConfig customize;
    int buffer_capacity = 90;
    CompensateConfig compensate;

    static ExperimentConfig from_file(const ConfigFile& cf) {
        static const std::map<std::string, std::set<std::string>> known = {
            {"data", {"root", "personal_root", "keywords", "train_per_cell", "split_seed"}},
            {"arch",
             {"sample_rate", "input_len", "sinc_filters", "sinc_kernel", "sinc_pool", "channels",
              "pools", "block_kernel", "group_size", "num_classes"}},
            {"train", {"epochs", "batch_size", "lr", "lr_end", "bn_momentum", "seed", "augment"}},
            {"noise", {"mav_offset_sigma", "sa_sigma", "static_per_column", "seed"}},
            {"customize",
             {"epochs", "scaling", "sga", "rgp", "rgp_lambda", "seed", "train_bias",
              "initial_lr_exponent", "lr_floor_exponent", "lr_halve_every", "buffer_capacity"}},
            {"compensate",
             {"probe_count", "trials", "finetune_epochs", "batch_size", "lr", "seed"}},
        };
        for (const auto& [section, keys] : cf.sections) {
            const auto it = known.find(section);
            if (it == known.end()) throw ConfigError("unknown config section [" + section + "]");
            for (const auto& [key, value] : keys) {
                (void)value;
                if (!it->second.count(key))
                    throw ConfigError("unknown config key " + section + "." + key);
            }
        }

        ExperimentConfig c;
        c.data.root = cf.get("data", "root", c.data.root);
        c.data.personal_root = cf.get("data", "personal_root", c.data.personal_root);
        c.data.keywords = cf.get_list("data", "keywords", c.data.keywords);
        c.data.train_per_cell = int(cf.get_int("data", "train_per_cell", c.data.train_per_cell));
        c.data.split_seed = uint64_t(cf.get_int("data", "split_seed", int64_t(c.data.split_seed)));

        c.arch.sample_rate = int(cf.get_int("arch", "sample_rate", c.arch.sample_rate));
        c.arch.input_len = int(cf.get_int("arch", "input_len", c.arch.input_len));
        c.arch.sinc_filters = int(cf.get_int("arch", "sinc_filters", c.arch.sinc_filters));
        c.arch.sinc_kernel = int(cf.get_int("arch", "sinc_kernel", c.arch.sinc_kernel));
        c.arch.sinc_pool = int(cf.get_int("arch", "sinc_pool", c.arch.sinc_pool));
        c.arch.channels = cf.get_int_list("arch", "channels", c.arch.channels);
        c.arch.pools = cf.get_int_list("arch", "pools", c.arch.pools);
        c.arch.block_kernel = int(cf.get_int("arch", "block_kernel", c.arch.block_kernel));
        c.arch.group_size = int(cf.get_int("arch", "group_size", c.arch.group_size));
        c.arch.num_classes = int(cf.get_int("arch", "num_classes", c.arch.num_classes));

        c.train.epochs = int(cf.get_int("train", "epochs", c.train.epochs));
        c.train.batch_size = int(cf.get_int("train", "batch_size", c.train.batch_size));
        c.train.lr = cf.get_double("train", "lr", c.train.lr);
        c.train.lr_end = cf.get_double("train", "lr_end", c.train.lr_end);
        c.train.bn_momentum = cf.get_double("train", "bn_momentum", c.train.bn_momentum);
        c.train.seed = uint64_t(cf.get_int("train", "seed", int64_t(c.train.seed)));
        c.train.augment = cf.get_bool("train", "augment", c.train.augment);

        c.noise.mav_offset_sigma =
            cf.get_double("noise", "mav_offset_sigma", c.noise.mav_offset_sigma);
        c.noise.sa_sigma = cf.get_double("noise", "sa_sigma", c.noise.sa_sigma);
        c.noise.static_per_column =
            cf.get_bool("noise", "static_per_column", c.noise.static_per_column);
        c.noise.seed = uint64_t(cf.get_int("noise", "seed", int64_t(c.noise.seed)));

        c.customize.epochs = int(cf.get_int("customize", "epochs", c.customize.epochs));
        c.customize.scaling =
            scaling_from_string(cf.get("customize", "scaling", to_string(c.customize.scaling)));
        c.customize.sga = cf.get_bool("customize", "sga", c.customize.sga);
        c.customize.rgp = cf.get_bool("customize", "rgp", c.customize.rgp);
        c.customize.rgp_lambda = cf.get_double("customize", "rgp_lambda", c.customize.rgp_lambda);
        c.customize.seed = uint64_t(cf.get_int("customize", "seed", int64_t(c.customize.seed)));
        c.customize.train_bias = cf.get_bool("customize", "train_bias", c.customize.train_bias);
        c.customize.initial_lr_exponent =
            int(cf.get_int("customize", "initial_lr_exponent", c.customize.initial_lr_exponent));
        c.customize.lr_floor_exponent =
            int(cf.get_int("customize", "lr_floor_exponent", c.customize.lr_floor_exponent));
        c.customize.lr_halve_every =
            int(cf.get_int("customize", "lr_halve_every", c.customize.lr_halve_every));
        c.buffer_capacity = int(cf.get_int("customize", "buffer_capacity", c.buffer_capacity));

        c.compensate.probe_count =
            int(cf.get_int("compensate", "probe_count", c.compensate.probe_count));
        c.compensate.trials = int(cf.get_int("compensate", "trials", c.compensate.trials));
        c.compensate.finetune_epochs =
            int(cf.get_int("compensate", "finetune_epochs", c.compensate.finetune_epochs));
        c.compensate.batch_size =
            int(cf.get_int("compensate", "batch_size", c.compensate.batch_size));
        c.compensate.lr = cf.get_double("compensate", "lr", c.compensate.lr);
        c.compensate.seed = uint64_t(cf.get_int("compensate", "seed", int64_t(c.compensate.seed)));
        return c;
    }

    static ExperimentConfig load(const std::filesystem::path& path) {
        return from_file(ConfigFile::load(path));
    }

    // Canonical serialization: fixed section/key order, shortest round-trip
    // numbers. parse(snapshot()) reproduces the configuration exactly, and
    // identical configurations produce identical bytes.
    std::string snapshot() const {
        std::ostringstream o;
        auto join_str = [](const std::vector<std::string>& v) {
            std::string s;
            for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
            return s;
        };
        auto join_int = [](const std::vector<int>& v) {
            std::string s;
            for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
            return s;
        };
        const char* tf[2] = {"false", "true"};
        o << "[data]\n";
        o << "root = " << data.root << "\n";
        o << "personal_root = " << data.personal_root << "\n";
        o << "keywords = " << join_str(data.keywords) << "\n";
        o << "train_per_cell = " << data.train_per_cell << "\n";
        o << "split_seed = " << data.split_seed << "\n";
        o << "\n[arch]\n";
        o << "sample_rate = " << arch.sample_rate << "\n";
        o << "input_len = " << arch.input_len << "\n";
        o << "sinc_filters = " << arch.sinc_filters << "\n";
        o << "sinc_kernel = " << arch.sinc_kernel << "\n";
        o << "sinc_pool = " << arch.sinc_pool << "\n";
        o << "channels = " << join_int(arch.channels) << "\n";
        o << "pools = " << join_int(arch.pools) << "\n";
        o << "block_kernel = " << arch.block_kernel << "\n";
        o << "group_size = " << arch.group_size << "\n";
        o << "num_classes = " << arch.num_classes << "\n";
        o << "\n[train]\n";
        o << "epochs = " << train.epochs << "\n";
        o << "batch_size = " << train.batch_size << "\n";
        o << "lr = " << detail::format_double(train.lr) << "\n";
        o << "lr_end = " << detail::format_double(train.lr_end) << "\n";
        o << "bn_momentum = " << detail::format_double(train.bn_momentum) << "\n";
        o << "seed = " << train.seed << "\n";
        o << "augment = " << tf[train.augment] << "\n";
        o << "\n[noise]\n";
        o << "mav_offset_sigma = " << detail::format_double(noise.mav_offset_sigma) << "\n";
        o << "sa_sigma = " << detail::format_double(noise.sa_sigma) << "\n";
        o << "static_per_column = " << tf[noise.static_per_column] << "\n";
        o << "seed = " << noise.seed << "\n";
        o << "\n[customize]\n";
        o << "epochs = " << customize.epochs << "\n";
        o << "scaling = " << to_string(customize.scaling) << "\n";
        o << "sga = " << tf[customize.sga] << "\n";
        o << "rgp = " << tf[customize.rgp] << "\n";
        o << "rgp_lambda = " << detail::format_double(customize.rgp_lambda) << "\n";
        o << "seed = " << customize.seed << "\n";
        o << "train_bias = " << tf[customize.train_bias] << "\n";
        o << "initial_lr_exponent = " << customize.initial_lr_exponent << "\n";
        o << "lr_floor_exponent = " << customize.lr_floor_exponent << "\n";
        o << "lr_halve_every = " << customize.lr_halve_every << "\n";
        o << "buffer_capacity = " << buffer_capacity << "\n";
        o << "\n[compensate]\n";
        o << "probe_count = " << compensate.probe_count << "\n";
        o << "trials = " << compensate.trials << "\n";
        o << "finetune_epochs = " << compensate.finetune_epochs << "\n";
        o << "batch_size = " << compensate.batch_size << "\n";
        o << "lr = " << detail::format_double(compensate.lr) << "\n";
        o << "seed = " << compensate.seed << "\n";
        return o.str();
    }
};

} // namespace kwsim
