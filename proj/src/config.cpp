/*
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "m3dbfs/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

namespace m3dbfs {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

[[noreturn]] void fail(const std::string& origin, std::size_t line, const std::string& msg) {
    throw std::runtime_error("config: " + origin + ":" + std::to_string(line) + ": " + msg);
}

double parse_double(const std::string& origin, std::size_t line, const std::string& key,
                    const std::string& raw) {
    try {
        std::size_t used = 0;
        double v = std::stod(raw, &used);
        if (used != raw.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        fail(origin, line, "cannot parse value '" + raw + "' for key '" + key + "'");
    }
}

std::uint64_t parse_uint(const std::string& origin, std::size_t line, const std::string& key,
                         const std::string& raw) {
    try {
        if (!raw.empty() && raw[0] == '-') throw std::invalid_argument("negative");
        std::size_t used = 0;
        std::uint64_t v = std::stoull(raw, &used);
        if (used != raw.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        fail(origin, line, "cannot parse value '" + raw + "' for key '" + key + "'");
    }
}

bool parse_bool(const std::string& origin, std::size_t line, const std::string& key,
                const std::string& raw) {
    if (raw == "true" || raw == "1") return true;
    if (raw == "false" || raw == "0") return false;
    fail(origin, line, "cannot parse value '" + raw + "' for key '" + key +
                           "' (expected true/false)");
}

std::string fmt_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

// One setter per key; range checks run at assignment so violations carry the
// line number of the offending entry.
using Setter = std::function<void(RunConfig&, const std::string& origin, std::size_t line,
                                  const std::string& raw)>;

#define DOUBLE_KEY(field, check, range_msg)                                                  \
    [](RunConfig& c, const std::string& o, std::size_t l, const std::string& raw) {          \
        double v = parse_double(o, l, #field, raw);                                          \
        if (!(check)) fail(o, l, std::string(#field) + " must " + (range_msg) + ", got " + raw); \
        c.field = v;                                                                         \
    }

#define UINT_KEY(field, check, range_msg)                                                    \
    [](RunConfig& c, const std::string& o, std::size_t l, const std::string& raw) {          \
        std::uint64_t v = parse_uint(o, l, #field, raw);                                     \
        if (!(check)) fail(o, l, std::string(#field) + " must " + (range_msg) + ", got " + raw); \
        c.field = static_cast<std::size_t>(v);                                               \
    }

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"n_samples", UINT_KEY(n_samples, v >= 2, "be at least 2")},
        {"regions", UINT_KEY(regions, v >= 2, "be at least 2")},
        {"timepoints", UINT_KEY(timepoints, v >= 2, "be at least 2")},
        {"class_gap", DOUBLE_KEY(class_gap, v >= 0.0, "be nonnegative")},
        {"noise", DOUBLE_KEY(noise, v >= 0.0, "be nonnegative")},
        {"fc_density", DOUBLE_KEY(fc_density, v > 0.0 && v <= 1.0, "lie in (0,1]")},
        {"sc_threshold", DOUBLE_KEY(sc_threshold, v >= 0.0, "be nonnegative")},
        {"encoder_layers", UINT_KEY(encoder_layers, v >= 1 && v <= 16, "lie in [1,16]")},
        {"encoder_hidden", UINT_KEY(encoder_hidden, v >= 1, "be positive")},
        {"embed_dim", UINT_KEY(embed_dim, v >= 1, "be positive")},
        {"expert_hidden", UINT_KEY(expert_hidden, v >= 1, "be positive")},
        {"experts", UINT_KEY(experts, v >= 1 && v <= 16, "lie in [1,16]")},
        {"k_top", UINT_KEY(k_top, v >= 1, "be positive")},
        {"moe_depth", UINT_KEY(moe_depth, v >= 1 && v <= 8, "lie in [1,8]")},
        {"warm_start",
         [](RunConfig& c, const std::string& o, std::size_t l, const std::string& raw) {
             c.warm_start = parse_bool(o, l, "warm_start", raw);
         }},
        {"moe_balance",
         [](RunConfig& c, const std::string& o, std::size_t l, const std::string& raw) {
             c.moe_balance = parse_bool(o, l, "moe_balance", raw);
         }},
        {"tau", DOUBLE_KEY(tau, v > 0.0, "be positive")},
        {"tau_c", DOUBLE_KEY(tau_c, v > 0.0, "be positive")},
        {"tau_d", DOUBLE_KEY(tau_d, v > 0.0, "be positive")},
        {"alpha", DOUBLE_KEY(alpha, v > 0.0 && v < 1.0, "lie in (0,1)")},
        {"beta", DOUBLE_KEY(beta, v > 0.0 && v < 1.0, "lie in (0,1)")},
        {"lr", DOUBLE_KEY(lr, v > 0.0, "be positive")},
        {"weight_decay", DOUBLE_KEY(weight_decay, v >= 0.0, "be nonnegative")},
        {"max_epochs", UINT_KEY(max_epochs, v >= 1, "be positive")},
        {"patience", UINT_KEY(patience, v >= 1, "be positive")},
        {"batch", UINT_KEY(batch, v >= 1, "be positive")},
        {"val_fraction", DOUBLE_KEY(val_fraction, v > 0.0 && v <= 0.5, "lie in (0,0.5]")},
        {"test_fraction", DOUBLE_KEY(test_fraction, v > 0.0 && v <= 0.5, "lie in (0,0.5]")},
        {"threads", UINT_KEY(threads, v >= 1 && v <= 256, "lie in [1,256]")},
        {"seed",
         [](RunConfig& c, const std::string& o, std::size_t l, const std::string& raw) {
             c.seed = parse_uint(o, l, "seed", raw);
         }},
        {"data_dir",
         [](RunConfig& c, const std::string&, std::size_t, const std::string& raw) {
             c.data_dir = raw;
         }},
        {"out_dir",
         [](RunConfig& c, const std::string&, std::size_t, const std::string& raw) {
             c.out_dir = raw;
         }},
    };
    return table;
}

#undef DOUBLE_KEY
#undef UINT_KEY

}  // namespace

void RunConfig::validate() const {
    if (k_top > experts)
        throw std::runtime_error("config: k_top (" + std::to_string(k_top) +
                                 ") must not exceed experts (" + std::to_string(experts) + ")");
    loss_config().validate();
}

LossConfig RunConfig::loss_config() const {
    LossConfig lc;
    lc.tau = tau;
    lc.tau_c = tau_c;
    lc.tau_d = tau_d;
    lc.alpha = alpha;
    lc.beta = beta;
    return lc;
}

SynthConfig RunConfig::synth_config() const {
    SynthConfig sc;
    sc.n_samples = n_samples;
    sc.regions = regions;
    sc.timepoints = timepoints;
    sc.class_gap = class_gap;
    sc.noise = noise;
    sc.seed = seed;
    return sc;
}

ThresholdOptions RunConfig::threshold_options() const {
    ThresholdOptions t;
    t.fc_density = fc_density;
    t.sc_threshold = sc_threshold;
    return t;
}

namespace {

// Applies assignments to an existing config without the final cross-field
// validation, so file contents and command-line overrides can be layered.
void parse_into(RunConfig& cfg, const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::string t = trim(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string::npos) fail(origin, lineno, "expected 'key = value', got '" + t + "'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) fail(origin, lineno, "missing key before '='");
        auto it = setters().find(key);
        if (it == setters().end()) fail(origin, lineno, "unknown key '" + key + "'");
        if (value.empty()) fail(origin, lineno, "missing value for key '" + key + "'");
        it->second(cfg, origin, lineno, value);
    }
}

std::string read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
    RunConfig cfg;
    parse_into(cfg, text, origin);
    cfg.validate();
    return cfg;
}

RunConfig parse_config(const std::string& path) {
    return parse_config_text(read_file(path), path);
}

RunConfig parse_config_with_overrides(const std::string& path,
                                      const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!path.empty()) parse_into(cfg, read_file(path), path);
    std::string joined;
    for (const std::string& o : overrides) joined += o + "\n";
    parse_into(cfg, joined, "--set");
    cfg.validate();
    return cfg;
}

std::string config_echo(const RunConfig& c) {
    std::ostringstream out;
    out << "n_samples = " << c.n_samples << "\n";
    out << "regions = " << c.regions << "\n";
    out << "timepoints = " << c.timepoints << "\n";
    out << "class_gap = " << fmt_double(c.class_gap) << "\n";
    out << "noise = " << fmt_double(c.noise) << "\n";
    out << "fc_density = " << fmt_double(c.fc_density) << "\n";
    out << "sc_threshold = " << fmt_double(c.sc_threshold) << "\n";
    out << "encoder_layers = " << c.encoder_layers << "\n";
    out << "encoder_hidden = " << c.encoder_hidden << "\n";
    out << "embed_dim = " << c.embed_dim << "\n";
    out << "expert_hidden = " << c.expert_hidden << "\n";
    out << "experts = " << c.experts << "\n";
    out << "k_top = " << c.k_top << "\n";
    out << "moe_depth = " << c.moe_depth << "\n";
    out << "warm_start = " << (c.warm_start ? "true" : "false") << "\n";
    out << "moe_balance = " << (c.moe_balance ? "true" : "false") << "\n";
    out << "tau = " << fmt_double(c.tau) << "\n";
    out << "tau_c = " << fmt_double(c.tau_c) << "\n";
    out << "tau_d = " << fmt_double(c.tau_d) << "\n";
    out << "alpha = " << fmt_double(c.alpha) << "\n";
    out << "beta = " << fmt_double(c.beta) << "\n";
    out << "lr = " << fmt_double(c.lr) << "\n";
    out << "weight_decay = " << fmt_double(c.weight_decay) << "\n";
    out << "max_epochs = " << c.max_epochs << "\n";
    out << "patience = " << c.patience << "\n";
    out << "batch = " << c.batch << "\n";
    out << "val_fraction = " << fmt_double(c.val_fraction) << "\n";
    out << "test_fraction = " << fmt_double(c.test_fraction) << "\n";
    out << "threads = " << c.threads << "\n";
    out << "seed = " << c.seed << "\n";
    out << "data_dir = " << c.data_dir << "\n";
    out << "out_dir = " << c.out_dir << "\n";
    return out.str();
}

}  // namespace m3dbfs
