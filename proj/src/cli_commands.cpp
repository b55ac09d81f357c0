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
#include "m3dbfs/cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "m3dbfs/pipeline.hpp"
#include "m3dbfs/rng.hpp"

namespace m3dbfs::cli {

namespace fs = std::filesystem;

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw std::runtime_error(msg);
}

void echo_config(const RunConfig& cfg, std::ostream& out) {
    out << "# effective config\n" << config_echo(cfg) << "\n";
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open " + path + " for writing");
    f << content;
    require(f.good(), "write failed for " + path);
}

std::string fmt_frac(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string metric_row(const char* name, double value, bool defined) {
    if (!defined) return std::string(name) + "\tundefined\n";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * value);
    return std::string(name) + "\t" + buf + "\n";
}

std::string metrics_tsv(const Metrics& m) {
    std::string out = "metric\tvalue\n";
    out += metric_row("ACC", m.acc, true);
    out += metric_row("SEN", m.sen, m.sen_defined);
    out += metric_row("SPE", m.spe, m.spe_defined);
    out += metric_row("F1", m.f1, m.f1_defined);
    out += metric_row("AUC", m.auc, m.auc_defined);
    return out;
}

void emit_metrics(std::ostream& out, const std::string& run_dir, const std::string& tag,
                  const Metrics& m) {
    std::string body = metrics_tsv(m);
    out << "# test metrics (" << tag << ")\n" << body << "\n";
    write_text(run_dir + "/metrics_" + tag + ".tsv", body);
}

void write_histories(const TrainResult& res, const std::string& run_dir, std::ostream& out) {
    for (const StageHistory& h : res.histories) {
        std::string path = run_dir + "/history_" + h.name + ".tsv";
        write_text(path, history_tsv(h));
        out << "wrote " << path << " (" << h.epochs.size() << " epochs)\n";
    }
}

Checkpoint need_checkpoint(const std::optional<Checkpoint>& fresh, const std::string& run_dir,
                           int stage, int wanted_by) {
    if (fresh) return *fresh;
    std::string path = run_dir + "/stage" + std::to_string(stage) + ".ckpt";
    require(fs::exists(path), "train --stage " + std::to_string(wanted_by) + " needs the stage-" +
                                  std::to_string(stage) + " checkpoint at " + path +
                                  "; run train --stage " + std::to_string(stage) + " first");
    return load_checkpoint(path);
}

void save_stage_ckpt(const Checkpoint& ckpt, const std::string& run_dir, int stage,
                     std::ostream& out) {
    std::string path = run_dir + "/stage" + std::to_string(stage) + ".ckpt";
    save_checkpoint(ckpt, path);
    out << "wrote " << path << "\n";
}

/// Architecture for rebuilding a checkpointed model comes from the config the
/// checkpoint itself carries, not from the caller's config.
RunConfig arch_of(const Checkpoint& ckpt, const std::string& ckpt_path) {
    return parse_config_text(ckpt.config_echo, ckpt_path + " (embedded config)");
}

void check_regions(const std::vector<PreparedSample>& data, const RunConfig& arch) {
    std::size_t have = data.front().x_sc->shape[0];
    require(have == arch.regions,
            "checkpoint expects " + std::to_string(arch.regions) +
                " regions but the dataset has " + std::to_string(have));
}

struct RawRow {
    std::string id, sc_file, ts_file;
    int label = 0;
};

std::vector<RawRow> read_raw_manifest(const std::string& raw_dir) {
    std::string path = raw_dir + "/manifest.tsv";
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "preprocess: cannot open " + path);
    std::string line;
    require(static_cast<bool>(std::getline(f, line)), "preprocess: empty manifest " + path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(line == "id\tlabel\tsc_file\tts_file",
            "preprocess: bad manifest header in " + path +
                " (expected id, label, sc_file, ts_file)");
    std::vector<RawRow> rows;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::string where = path + ":" + std::to_string(lineno);
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            std::size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        require(fields.size() == 4,
                "preprocess: " + where + ": expected 4 tab-separated fields, got " +
                    std::to_string(fields.size()));
        RawRow r;
        r.id = fields[0];
        require(fields[1] == "0" || fields[1] == "1",
                "preprocess: " + where + ": label must be 0 or 1, got '" + fields[1] + "'");
        r.label = fields[1] == "1" ? 1 : 0;
        r.sc_file = fields[2];
        r.ts_file = fields[3];
        rows.push_back(std::move(r));
    }
    require(!rows.empty(), "preprocess: manifest lists no samples in " + path);
    return rows;
}

Sample build_raw_sample(const RawRow& row, const std::string& raw_dir, const RunConfig& cfg) {
    std::size_t rows = 0, cols = 0;
    std::vector<double> scv = read_matrix_csv(raw_dir + "/" + row.sc_file, rows, cols);
    require(rows == cols, "structural matrix must be square, got " + std::to_string(rows) +
                              "x" + std::to_string(cols));
    std::size_t n = rows;
    double asym = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            asym = std::max(asym, std::fabs(scv[i * n + j] - scv[j * n + i]));
            require(scv[i * n + j] >= 0.0 && scv[j * n + i] >= 0.0,
                    "negative fiber count at (" + std::to_string(i) + ", " +
                        std::to_string(j) + ")");
        }
    require(asym <= 1e-6, "structural matrix asymmetric beyond 1e-6 (max difference " +
                              fmt_frac(asym) + ")");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double avg = 0.5 * (scv[i * n + j] + scv[j * n + i]);
            scv[i * n + j] = avg;
            scv[j * n + i] = avg;
        }
    ConnectivityMatrix sc{n, ConnKind::structural, std::move(scv)};
    sc.validate();

    std::size_t tr = 0, tc = 0;
    std::vector<double> tsv = read_matrix_csv(raw_dir + "/" + row.ts_file, tr, tc);
    require(tr == n, "time series has " + std::to_string(tr) +
                         " regions but the structural matrix has " + std::to_string(n));
    TimeSeries ts{tr, tc, std::move(tsv)};
    ConnectivityMatrix fc = pearson_fc(ts);

    Sample s;
    s.id = row.id;
    s.label = row.label;
    s.sc = build_graph(sc, threshold_absolute(sc, cfg.sc_threshold));
    s.fc = build_graph(fc, threshold_proportional(fc, cfg.fc_density));
    return s;
}

void dataset_summary(const Dataset& d, const std::string& dir, std::ostream& out) {
    std::size_t pos = 0;
    for (const Sample& s : d.samples)
        if (s.label == 1) ++pos;
    out << "dataset: " << d.samples.size() << " samples, " << d.region_count
        << " regions, class balance " << d.samples.size() - pos << "/" << pos << ", wrote "
        << dir << "\n";
}

}  // namespace

std::string make_run_dir(const RunConfig& cfg) {
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
    std::string base = cfg.out_dir + "/" + stamp + "-seed" + std::to_string(cfg.seed);
    std::string dir = base;
    for (int k = 2; fs::exists(dir); ++k) dir = base + "-" + std::to_string(k);
    fs::create_directories(dir);
    return dir;
}

void cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
    echo_config(cfg, out);
    Dataset d = synth_generate(cfg.synth_config());
    save_dataset(d, cfg.data_dir);
    dataset_summary(d, cfg.data_dir, out);
}

void cmd_preprocess(const RunConfig& cfg, const std::string& raw_dir, std::ostream& out) {
    echo_config(cfg, out);
    Dataset d;
    for (const RawRow& row : read_raw_manifest(raw_dir)) {
        Sample s;
        try {
            s = build_raw_sample(row, raw_dir, cfg);
        } catch (const std::exception& e) {
            throw std::runtime_error("preprocess: sample " + row.id + ": " + e.what());
        }
        if (d.samples.empty())
            d.region_count = s.sc.regions;
        else
            require(s.sc.regions == d.region_count,
                    "preprocess: sample " + row.id + ": has " + std::to_string(s.sc.regions) +
                        " regions but earlier samples have " + std::to_string(d.region_count));
        d.samples.push_back(std::move(s));
    }
    save_dataset(d, cfg.data_dir);
    dataset_summary(d, cfg.data_dir, out);
}

void cmd_train(const RunConfig& cfg, const std::string& stage, const std::string& run_dir,
               std::ostream& out) {
    echo_config(cfg, out);
    bool all = stage == "all";
    bool want1 = all || stage == "1";
    bool want2 = all || stage == "2";
    bool want3 = all || stage == "3";
    require(want1 || want2 || want3, "train: unknown stage '" + stage + "'");

    Dataset d = load_dataset(cfg.data_dir, cfg.threshold_options());
    auto prepared = prepare_samples(d);
    std::vector<PreparedSample> train_part, test_part;
    Rng split_rng = derive_rng(cfg.seed, "train/test-split");
    stratified_split(prepared, cfg.test_fraction, split_rng, train_part, test_part);
    require(!test_part.empty(), "train: dataset too small to hold out a test split");
    out << "split: " << train_part.size() << " train / " << test_part.size() << " test\n";

    fs::create_directories(run_dir);
    write_text(run_dir + "/config.txt", config_echo(cfg));

    std::optional<Checkpoint> ck1, ck2;
    if (want1) {
        TrainResult res = train_stage1(train_part, cfg, derive_seed(cfg.seed, "stage1"));
        ck1 = res.ckpt;
        save_stage_ckpt(res.ckpt, run_dir, 1, out);
        write_histories(res, run_dir, out);
        ParameterStore store;
        Stage1Model m = stage1_model_from_checkpoint(store, res.ckpt, cfg);
        emit_metrics(out, run_dir, "stage1_sc",
                     evaluate([&](const PreparedSample& s) {
                         return stage1_logits(m, s, Modality::sc);
                     }, test_part));
        emit_metrics(out, run_dir, "stage1_fc",
                     evaluate([&](const PreparedSample& s) {
                         return stage1_logits(m, s, Modality::fc);
                     }, test_part));
    }
    if (want2) {
        Checkpoint prev = need_checkpoint(ck1, run_dir, 1, 2);
        TrainResult res = train_stage2(train_part, prev, cfg, derive_seed(cfg.seed, "stage2"));
        ck2 = res.ckpt;
        save_stage_ckpt(res.ckpt, run_dir, 2, out);
        write_histories(res, run_dir, out);
        ParameterStore store;
        Stage2Model m = stage2_model_from_checkpoint(store, res.ckpt, cfg);
        emit_metrics(out, run_dir, "stage2",
                     evaluate([&](const PreparedSample& s) {
                         return stage2_forward(m, s).logits;
                     }, test_part));
    }
    if (want3) {
        Checkpoint prev = need_checkpoint(ck2, run_dir, 2, 3);
        TrainResult res = train_stage3(train_part, prev, cfg, derive_seed(cfg.seed, "stage3"));
        save_stage_ckpt(res.ckpt, run_dir, 3, out);
        write_histories(res, run_dir, out);
        ParameterStore store;
        Stage3Model m = stage3_model_from_checkpoint(store, res.ckpt, cfg);
        emit_metrics(out, run_dir, "stage3",
                     evaluate([&](const PreparedSample& s) {
                         Rng quiet(0);
                         return stage3_forward(m, s, false, quiet).logits;
                     }, test_part));
    }
}

void cmd_eval(const RunConfig& cfg, const std::string& ckpt_path, std::size_t cv_k,
              std::size_t repeats, const std::string& run_dir, std::ostream& out) {
    echo_config(cfg, out);
    fs::create_directories(run_dir);
    write_text(run_dir + "/config.txt", config_echo(cfg));
    Dataset d = load_dataset(cfg.data_dir, cfg.threshold_options());

    if (cv_k > 0) {
        CvResult res = run_cv(d, cfg, cv_k, repeats, cfg.seed);
        out << "# cross-validation: " << cv_k << "-fold x " << repeats << " repeats ("
            << res.runs.size() << " runs)\n"
            << res.table_tsv << "\n";
        write_text(run_dir + "/cv_metrics.tsv", res.table_tsv);
        out << "wrote " << run_dir << "/cv_metrics.tsv\n";
        return;
    }

    Checkpoint ckpt = load_checkpoint(ckpt_path);
    require(ckpt.stage == 2 || ckpt.stage == 3,
            "eval supports stage-2 and stage-3 checkpoints, got stage " +
                std::to_string(ckpt.stage));
    RunConfig arch = arch_of(ckpt, ckpt_path);
    auto prepared = prepare_samples(d);
    check_regions(prepared, arch);

    Metrics m;
    ParameterStore store;
    if (ckpt.stage == 2) {
        Stage2Model model = stage2_model_from_checkpoint(store, ckpt, arch);
        m = evaluate([&](const PreparedSample& s) { return stage2_forward(model, s).logits; },
                     prepared);
    } else {
        Stage3Model model = stage3_model_from_checkpoint(store, ckpt, arch);
        m = evaluate(
            [&](const PreparedSample& s) {
                Rng quiet(0);
                return stage3_forward(model, s, false, quiet).logits;
            },
            prepared);
    }
    std::string body = metrics_tsv(m);
    out << "# eval metrics (stage " << static_cast<int>(ckpt.stage) << ")\n" << body << "\n";
    write_text(run_dir + "/eval_metrics.tsv", body);
    out << "wrote " << run_dir << "/eval_metrics.tsv\n";
}

void cmd_inspect_experts(const RunConfig& cfg, const std::string& ckpt_path,
                         const std::string& run_dir, std::ostream& out) {
    echo_config(cfg, out);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    expect_stage(ckpt, 3);
    RunConfig arch = arch_of(ckpt, ckpt_path);
    Dataset d = load_dataset(cfg.data_dir, cfg.threshold_options());
    auto prepared = prepare_samples(d);
    check_regions(prepared, arch);

    fs::create_directories(run_dir);
    write_text(run_dir + "/config.txt", config_echo(cfg));
    ParameterStore store;
    Stage3Model model = stage3_model_from_checkpoint(store, ckpt, arch);
    RoutingSummary sum = aggregate_routing(model, prepared);

    static const char* kind_names[3] = {"sc", "fc", "fusion"};
    std::string report_a = "moe,block,expert,fraction\n";
    for (std::size_t kind = 0; kind < 3; ++kind)
        for (std::size_t l = 0; l < sum.depth; ++l)
            for (std::size_t e = 0; e < sum.experts; ++e)
                report_a += std::string(kind_names[kind]) + "," + std::to_string(l) + "," +
                            std::to_string(e) + "," + fmt_frac(sum.fractions[kind][l][e]) +
                            "\n";

    std::string report_b = "block,expert,token_count,sc_fraction,fc_fraction\n";
    for (std::size_t l = 0; l < sum.depth; ++l)
        for (std::size_t e = 0; e < sum.experts; ++e) {
            double sc_frac = sum.fusion_sc_frac[l][e];
            double fc_frac = sum.fusion_counts[l][e] > 0 ? 1.0 - sc_frac : 0.0;
            report_b += std::to_string(l) + "," + std::to_string(e) + "," +
                        std::to_string(sum.fusion_counts[l][e]) + "," + fmt_frac(sc_frac) +
                        "," + fmt_frac(fc_frac) + "\n";
        }

    out << "# expert fractions\n" << report_a << "\n# fusion origin\n" << report_b << "\n";
    write_text(run_dir + "/expert_fractions.csv", report_a);
    write_text(run_dir + "/fusion_origin.csv", report_b);
    out << "wrote " << run_dir << "/expert_fractions.csv\n";
    out << "wrote " << run_dir << "/fusion_origin.csv\n";
}

}  // namespace m3dbfs::cli
