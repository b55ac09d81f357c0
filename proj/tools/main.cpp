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
#include <CLI11.hpp>
#include <iostream>
#include <string>
#include <vector>

#include "m3dbfs/cli.hpp"

namespace {

struct Common {
    std::string config_path;
    std::vector<std::string> sets;

    void attach(CLI::App* sub) {
        sub->add_option("--config", config_path, "Config file (key = value lines)")
            ->check(CLI::ExistingFile);
        sub->add_option("--set", sets, "Override a config key, e.g. --set seed=11");
    }
    m3dbfs::RunConfig resolve() const {
        return m3dbfs::parse_config_with_overrides(config_path, sets);
    }
};

std::string run_dir_or_default(const std::string& given, const m3dbfs::RunConfig& cfg) {
    return given.empty() ? m3dbfs::cli::make_run_dir(cfg) : given;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Staged multimodal brain-graph fusion pipeline"};
    app.require_subcommand(1);

    Common gen_common, pre_common, train_common, eval_common, inspect_common;
    std::string raw_dir, stage = "all", train_run, eval_run, inspect_run, eval_ckpt,
                inspect_ckpt;
    std::size_t cv_k = 0, repeats = 1;

    CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    gen_common.attach(gen);

    CLI::App* pre = app.add_subcommand("preprocess", "Build a dataset from raw CSVs");
    pre_common.attach(pre);
    pre->add_option("--raw", raw_dir, "Directory with manifest.tsv and raw CSVs")
        ->required();

    CLI::App* train = app.add_subcommand("train", "Train pipeline stages");
    train_common.attach(train);
    train->add_option("--stage", stage, "Stage to train: 1, 2, 3, or all")
        ->check(CLI::IsMember({"1", "2", "3", "all"}));
    train->add_option("--run", train_run, "Run directory (default: new timestamped dir)");

    CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint or run cross-validation");
    eval_common.attach(ev);
    CLI::Option* ckpt_opt = ev->add_option("--ckpt", eval_ckpt, "Checkpoint to evaluate");
    CLI::Option* cv_opt = ev->add_option("--cv", cv_k, "Cross-validation fold count");
    ev->add_option("--repeats", repeats, "Cross-validation repeats")->needs(cv_opt);
    ckpt_opt->excludes(cv_opt);
    cv_opt->excludes(ckpt_opt);
    ev->add_option("--run", eval_run, "Run directory (default: new timestamped dir)");

    CLI::App* inspect = app.add_subcommand("inspect-experts", "Routing census reports");
    inspect_common.attach(inspect);
    inspect->add_option("--ckpt", inspect_ckpt, "Stage-3 checkpoint")->required();
    inspect->add_option("--run", inspect_run, "Run directory (default: new timestamped dir)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            m3dbfs::cli::cmd_gen_data(gen_common.resolve(), std::cout);
        } else if (pre->parsed()) {
            m3dbfs::cli::cmd_preprocess(pre_common.resolve(), raw_dir, std::cout);
        } else if (train->parsed()) {
            m3dbfs::RunConfig cfg = train_common.resolve();
            m3dbfs::cli::cmd_train(cfg, stage, run_dir_or_default(train_run, cfg), std::cout);
        } else if (ev->parsed()) {
            if (eval_ckpt.empty() && cv_k == 0)
                throw std::runtime_error("eval needs either --ckpt or --cv");
            m3dbfs::RunConfig cfg = eval_common.resolve();
            m3dbfs::cli::cmd_eval(cfg, eval_ckpt, cv_k, repeats,
                                  run_dir_or_default(eval_run, cfg), std::cout);
        } else if (inspect->parsed()) {
            m3dbfs::RunConfig cfg = inspect_common.resolve();
            m3dbfs::cli::cmd_inspect_experts(cfg, inspect_ckpt,
                                             run_dir_or_default(inspect_run, cfg), std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
