// tres-diag: generate -> train -> attribute -> select -> train(selected) -> report.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>

#include "tresdiag/error.hpp"
#include "tresdiag/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tresdiag;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON configuration file");
  sub->add_option("--seed", c.seed, "master seed (overrides the config)");
  sub->add_option("--out", c.out, "output directory");
  sub->add_flag("--force", c.force, "overwrite artifacts in a non-empty output directory");
}

PipelineConfig load(const Common& c) {
  PipelineConfig config = c.config.empty() ? PipelineConfig{} : load_pipeline_config(c.config);
  if (c.seed) config.seed = *c.seed;
  return config;
}

fs::path or_default(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  if (dynamic_cast<const IoError*>(&e)) return 4;
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return 4;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel selection for LOCA diagnosis with TRES-CNN saliency"};
  app.require_subcommand(1);

  Common gen_c;
  std::optional<std::size_t> gen_cases;
  CLI::App* gen = app.add_subcommand("generate", "write the synthetic transient dataset");
  add_common(gen, gen_c);
  gen->add_option("--cases", gen_cases, "number of cases (the test split keeps its proportion)")
      ->check(CLI::PositiveNumber);

  Common train_c;
  std::string train_data, train_channels = "all";
  CLI::App* tr = app.add_subcommand("train", "train a model on the training split");
  add_common(tr, train_c);
  tr->add_option("--data", train_data, "dataset directory");
  tr->add_option("--channels", train_channels, "\"all\" or a file with one channel name per line");

  Common att_c;
  std::string att_run, att_data;
  bool att_dry = false;
  CLI::App* att = app.add_subcommand("attribute", "Grad-CAM++ and LIME attributions for every training case");
  add_common(att, att_c);
  att->add_option("--run", att_run, "training run directory holding checkpoint.json");
  att->add_option("--data", att_data, "dataset directory");
  att->add_flag("--dry-run", att_dry, "list the files that would be read and stop");

  Common sel_c;
  std::string sel_att;
  std::optional<std::size_t> sel_k;
  bool sel_dry = false;
  CLI::App* sel = app.add_subcommand("select", "rank channels and write the selected set");
  add_common(sel, sel_c);
  sel->add_option("--attributions", sel_att, "attribution directory");
  sel->add_option("--k", sel_k, "number of channels to select");
  sel->add_flag("--dry-run", sel_dry, "list the files that would be read and stop");

  Common rep_c;
  std::string rep_full, rep_sel, rep_data, rep_selection;
  CLI::App* rep = app.add_subcommand("report", "compare the full and selected runs on the test split");
  add_common(rep, rep_c);
  rep->add_option("--full", rep_full, "run directory of the all-channel model");
  rep->add_option("--selected", rep_sel, "run directory of the selected-channel model");
  rep->add_option("--data", rep_data, "dataset directory");
  rep->add_option("--selection", rep_selection, "directory holding significance.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      PipelineConfig config = load(gen_c);
      if (gen_cases) {
        const double share = static_cast<double>(config.dataset.num_test) / static_cast<double>(config.dataset.num_cases);
        config.dataset.num_cases = *gen_cases;
        config.dataset.num_test = std::min<std::size_t>(
            *gen_cases - 1, std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(share * *gen_cases))));
      }
      const fs::path out = or_default(gen_c.out, config.paths.dataset);
      const GenerateResult r = cmd_generate(config, out, gen_c.force);
      std::cout << "wrote " << r.cases << " cases to " << out.string() << " (" << r.train << " train, " << r.test
                << " test)\n";
    } else if (tr->parsed()) {
      const PipelineConfig config = load(train_c);
      const fs::path data = or_default(train_data, config.paths.dataset);
      std::optional<fs::path> channel_file;
      if (train_channels != "all") channel_file = fs::path(train_channels);
      const fs::path out = or_default(train_c.out, channel_file ? config.paths.selected_run : config.paths.full_run);
      auto progress = [](const IterationRecord& r) {
        if (r.iteration % 50 == 0) {
          std::fprintf(stderr, "iteration %zu  loss %.6f  (cl %.6f, re %.6f)  %.1f s\n", r.iteration, r.loss,
                       r.loss_cl, r.loss_re, r.wall_time_s);
        }
      };
      const TrainRunResult r = cmd_train(config, data, out, channel_file, train_c.force, progress);
      std::cout << "trained on " << r.channels << " channels: " << r.iterations << " iterations, " << r.termination
                << "\n";
    } else if (att->parsed()) {
      const PipelineConfig config = load(att_c);
      const fs::path run = or_default(att_run, config.paths.full_run);
      const fs::path data = or_default(att_data, config.paths.dataset);
      const fs::path out = or_default(att_c.out, config.paths.attributions);
      const AccessList access = cmd_attribute(config, run, data, out, att_c.force, att_dry);
      if (att_dry) {
        for (const auto& p : access.read) std::cout << p.string() << "\n";
      } else {
        std::cout << "wrote " << access.read.size() - 2 << " attribution files to " << out.string() << "\n";
      }
    } else if (sel->parsed()) {
      PipelineConfig config = load(sel_c);
      if (sel_k) config.select.k = *sel_k;
      const fs::path in = or_default(sel_att, config.paths.attributions);
      const fs::path out = or_default(sel_c.out, config.paths.selection);
      const SelectResult r = cmd_select(config, in, out, sel_c.force, sel_dry);
      if (sel_dry) {
        for (const auto& p : r.access.read) std::cout << p.string() << "\n";
      } else {
        for (const auto& name : r.ranking.selected) std::cout << name << "\n";
      }
    } else if (rep->parsed()) {
      const PipelineConfig config = load(rep_c);
      const ReportResult r = cmd_report(config, or_default(rep_full, config.paths.full_run),
                                        or_default(rep_sel, config.paths.selected_run),
                                        or_default(rep_data, config.paths.dataset),
                                        or_default(rep_selection, config.paths.selection),
                                        or_default(rep_c.out, config.paths.report), rep_c.force);
      std::cout << report_markdown(r.report, &r.recovery);
    }
  } catch (const std::exception& e) {
    std::cerr << "tres-diag: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
