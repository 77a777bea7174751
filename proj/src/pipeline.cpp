#include "tresdiag/pipeline.hpp"

#include <algorithm>
#include <fstream>

#include "tresdiag/error.hpp"

namespace tresdiag {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

Json to_json(const PipelineConfig& c) {
  return Json{{"dataset", to_json(c.dataset)},
              {"arch", to_json(c.arch)},
              {"train", to_json(c.train)},
              {"interpret",
               {{"perturbations", c.interpret.perturbations},
                {"kernel_width", c.interpret.kernel_width},
                {"ridge", c.interpret.ridge}}},
              {"select",
               {{"k", c.select.k}, {"gradcam_weight", c.select.gradcam_weight}, {"lime_weight", c.select.lime_weight}}},
              {"paths",
               {{"dataset", c.paths.dataset.string()},
                {"full_run", c.paths.full_run.string()},
                {"selected_run", c.paths.selected_run.string()},
                {"attributions", c.paths.attributions.string()},
                {"selection", c.paths.selection.string()},
                {"report", c.paths.report.string()}}},
              {"seed", c.seed},
              {"threads", c.threads}};
}

PipelineConfig pipeline_config_from_json(const Json& j) {
  PipelineConfig c;
  StrictObject o(j, "config");
  if (const Json* d = o.child("dataset")) c.dataset = generator_config_from_json(*d);
  if (const Json* a = o.child("arch")) c.arch = arch_config_from_json(*a);
  if (const Json* t = o.child("train")) c.train = train_config_from_json(*t);
  if (const Json* i = o.child("interpret")) {
    StrictObject io(*i, "interpret");
    io.read("perturbations", c.interpret.perturbations);
    io.read("kernel_width", c.interpret.kernel_width);
    io.read("ridge", c.interpret.ridge);
    io.finish();
  }
  if (const Json* s = o.child("select")) {
    StrictObject so(*s, "select");
    so.read("k", c.select.k);
    so.read("gradcam_weight", c.select.gradcam_weight);
    so.read("lime_weight", c.select.lime_weight);
    so.finish();
  }
  if (const Json* p = o.child("paths")) {
    StrictObject po(*p, "paths");
    auto path = [&](const char* key, fs::path& target) {
      std::string s = target.string();
      po.read(key, s);
      target = s;
    };
    path("dataset", c.paths.dataset);
    path("full_run", c.paths.full_run);
    path("selected_run", c.paths.selected_run);
    path("attributions", c.paths.attributions);
    path("selection", c.paths.selection);
    path("report", c.paths.report);
    po.finish();
  }
  o.read("seed", c.seed);
  o.read("threads", c.threads);
  o.finish();
  validate(c.dataset);
  validate(c.train);
  if (c.select.k == 0) throw ConfigError("select.k must be at least 1");
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  Json j;
  try {
    in >> j;
  } catch (const Json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return pipeline_config_from_json(j);
}

std::uint64_t dataset_seed(std::uint64_t master) { return Rng(master).child("dataset").seed(); }
Rng init_stream(std::uint64_t master) { return Rng(master).child("init"); }
Rng lime_stream(std::uint64_t master) { return Rng(master).child("lime"); }

void prepare_output(const fs::path& dir, bool force, const std::vector<std::string>& artifacts) {
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw IoError("output path " + dir.string() + " is not a directory");
    if (!fs::is_empty(dir, ec)) {
      if (!force) throw ConfigError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
      for (const auto& name : artifacts) fs::remove_all(dir / name, ec);
      // Attribution files are named per case.
      if (std::find(artifacts.begin(), artifacts.end(), "case_*.json") != artifacts.end()) {
        for (const auto& entry : fs::directory_iterator(dir)) {
          const std::string n = entry.path().filename().string();
          if (n.starts_with("case_") && n.ends_with(".json")) fs::remove(entry.path(), ec);
        }
      }
    }
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Commands

GenerateResult cmd_generate(const PipelineConfig& config, const fs::path& out, bool force) {
  prepare_output(out, force, {"manifest.json", "cases"});
  const Dataset ds = generate_dataset(config.dataset, dataset_seed(config.seed), config.threads);
  save_dataset(ds, out);
  return GenerateResult{ds.cases.size(), ds.indices(Split::train).size(), ds.indices(Split::test).size()};
}

namespace {

std::vector<std::size_t> test_case_ids(const Dataset& ds) {
  std::vector<std::size_t> ids;
  for (std::size_t i : ds.indices(Split::test)) ids.push_back(ds.cases[i].case_id);
  return ids;
}

struct Run {
  TrainedModel model;
  Json training;
  TrainLog log;
};

Run load_run(const fs::path& dir) {
  Run r;
  r.model = load_checkpoint(dir / kCheckpointFile, &r.training);
  r.log = load_train_log(dir / kTrainLogFile);
  return r;
}

}  // namespace

TrainRunResult cmd_train(const PipelineConfig& config, const fs::path& data, const fs::path& out,
                         const std::optional<fs::path>& channel_file, bool force,
                         const std::function<void(const IterationRecord&)>& progress) {
  const Dataset meta = load_dataset(data, LoadOptions{std::nullopt, false, nullptr});
  std::vector<std::string> channels = meta.channel_names();
  if (channel_file) {
    channels = read_channel_list(*channel_file);
    channel_rows(channels, meta.channel_names());  // unknown names fail here, listed
  }
  prepare_output(out, force, {kCheckpointFile, kTrainLogFile, "checkpoint_last_good.json"});
  const Dataset train_split = load_dataset(data, LoadOptions{Split::train});

  ArchConfig arch = config.arch;
  arch.channels = channels.size();
  arch.samples = meta.config.num_samples();
  TrainConfig tc = config.train;
  tc.seed = config.seed;
  TrainedModel model = build_model(arch, init_stream(config.seed), channels);

  TrainOptions options;
  options.abort_checkpoint = out / "checkpoint_last_good.json";
  options.on_iteration = progress;
  TrainResult result = train(std::move(model), train_split, tc, options);

  const Json extra{{"seed", config.seed},
                   {"train", to_json(tc)},
                   {"channel_source", channel_file ? channel_file->string() : std::string("all")},
                   {"dataset", {{"master_seed", meta.master_seed}, {"test_cases", test_case_ids(meta)}}}};
  save_checkpoint(result.model, out / kCheckpointFile, &extra);
  save_train_log(result.log, out / kTrainLogFile);
  return TrainRunResult{channels.size(), result.log.iterations(), result.log.termination};
}

AccessList cmd_attribute(const PipelineConfig& config, const fs::path& run, const fs::path& data, const fs::path& out,
                         bool force, bool dry_run) {
  AccessList access;
  const fs::path checkpoint = run / kCheckpointFile;
  access.read.push_back(checkpoint);
  const TrainedModel model = load_checkpoint(checkpoint);
  if (model.arch.kind == ArchKind::mlp_baseline) {
    throw UnsupportedError("Grad-CAM++ needs a convolutional architecture, checkpoint " + checkpoint.string() +
                           " is " + to_string(model.arch.kind));
  }
  const Dataset ds = load_dataset(data, LoadOptions{Split::train, !dry_run, &access.read});
  channel_rows(model.channels, ds.channel_names());
  if (dry_run) return access;

  prepare_output(out, force, {kChannelsFile, "case_*.json"});
  std::vector<std::size_t> indices(ds.cases.size());
  for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
  const auto attributions =
      explain_cases(model, ds, indices, config.interpret, lime_stream(config.seed), config.threads);
  save_attributions(attributions, model.channels, out);
  write_channel_list(model.channels, out / kChannelsFile);
  return access;
}

SelectResult cmd_select(const PipelineConfig& config, const fs::path& attributions, const fs::path& out, bool force,
                        bool dry_run) {
  SelectResult result;
  if (config.select.k == 0) throw ConfigError("k must be at least 1");
  const fs::path channel_path = attributions / kChannelsFile;
  result.access.read.push_back(channel_path);
  const std::vector<std::string> channels = read_channel_list(channel_path);
  if (config.select.k > channels.size()) {
    throw ConfigError("k = " + std::to_string(config.select.k) + " exceeds the " + std::to_string(channels.size()) +
                      " channels");
  }
  if (!fs::is_directory(attributions)) throw IoError("missing attribution directory " + attributions.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(attributions)) {
    const std::string n = entry.path().filename().string();
    if (n.starts_with("case_") && n.ends_with(".json")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  result.access.read.insert(result.access.read.end(), files.begin(), files.end());
  if (dry_run) return result;

  const std::vector<CaseAttribution> atts = load_attributions(attributions, channels);
  std::vector<CombinedCase> combined;
  for (const auto& a : atts) {
    combined.push_back(
        combine_case_attribution(a.gradcam, a.lime, config.select.gradcam_weight, config.select.lime_weight));
  }
  const LumpedSaliency lumped = aggregate(combined);
  result.ranking = rank_and_select(channel_major_scores(combined), channels, config.select.k);

  prepare_output(out, force, {kSignificanceFile, kLumpedFile, kSelectedFile});
  write_significance(result.ranking, out / kSignificanceFile);
  write_lumped_saliency(lumped, channels, out / kLumpedFile);
  write_channel_list(result.ranking.selected, out / kSelectedFile);
  return result;
}

ReportResult cmd_report(const PipelineConfig&, const fs::path& full_run, const fs::path& selected_run,
                        const fs::path& data, const fs::path& selection, const fs::path& out, bool force) {
  const Run full = load_run(full_run);
  const Run sel = load_run(selected_run);
  const Dataset meta = load_dataset(data, LoadOptions{std::nullopt, false, nullptr});
  const Json expected = test_case_ids(meta);
  auto test_split_of = [](const Run& r, const fs::path& dir) {
    try {
      return r.training.at("dataset").at("test_cases");
    } catch (const Json::exception&) {
      throw ValidationError("checkpoint in " + dir.string() + " does not record its test split");
    }
  };
  if (test_split_of(full, full_run) != test_split_of(sel, selected_run)) {
    throw ValidationError("runs " + full_run.string() + " and " + selected_run.string() +
                          " were evaluated on different test splits");
  }
  if (test_split_of(full, full_run) != expected) {
    throw ValidationError("run " + full_run.string() + " was trained on a different split of " + data.string());
  }
  const SignificanceRanking ranking = read_significance(selection / kSignificanceFile);

  const Dataset test = load_dataset(data, LoadOptions{Split::test});
  const RunSummary fs_{evaluate(full.model, test, Split::test), full.log, full.model.channels.size()};
  const RunSummary ss_{evaluate(sel.model, test, Split::test), sel.log, sel.model.channels.size()};
  ReportResult r;
  r.report = compare_runs(fs_, ss_, sel.model.channels);
  r.recovery = selection_recovery(ranking, meta.catalog);

  prepare_output(out, force, {kReportJson, kReportMarkdown});
  {
    std::ofstream o(out / kReportJson, std::ios::binary);
    if (!o) throw IoError("cannot write " + (out / kReportJson).string());
    o << report_to_json(r.report, &r.recovery).dump(2) << '\n';
  }
  {
    std::ofstream o(out / kReportMarkdown, std::ios::binary);
    if (!o) throw IoError("cannot write " + (out / kReportMarkdown).string());
    o << report_markdown(r.report, &r.recovery);
  }
  return r;
}

ReportResult run_pipeline(const PipelineConfig& config, const fs::path& root, bool force,
                          const std::function<void(const std::string&)>& log) {
  const PathsConfig& p = config.paths;
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  const GenerateResult g = cmd_generate(config, root / p.dataset, force);
  say("generated " + std::to_string(g.cases) + " cases (" + std::to_string(g.train) + " train, " +
      std::to_string(g.test) + " test)");
  const TrainRunResult full = cmd_train(config, root / p.dataset, root / p.full_run, std::nullopt, force);
  say("full run: " + std::to_string(full.iterations) + " iterations, " + full.termination);
  cmd_attribute(config, root / p.full_run, root / p.dataset, root / p.attributions, force);
  say("attributions written");
  const SelectResult s = cmd_select(config, root / p.attributions, root / p.selection, force);
  say("selected " + std::to_string(s.ranking.selected.size()) + " channels");
  const TrainRunResult sel =
      cmd_train(config, root / p.dataset, root / p.selected_run, root / p.selection / kSelectedFile, force);
  say("selected run: " + std::to_string(sel.iterations) + " iterations, " + sel.termination);
  return cmd_report(config, root / p.full_run, root / p.selected_run, root / p.dataset, root / p.selection,
                    root / p.report, force);
}

}  // namespace tresdiag
