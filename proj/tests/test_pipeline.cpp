#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "support.hpp"
#include "tresdiag/error.hpp"
#include "tresdiag/pipeline.hpp"

using namespace tresdiag;
using tresdiag::testing::TempDir;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config() {
  PipelineConfig c;
  c.dataset.num_cases = 24;
  c.dataset.num_test = 6;
  c.dataset.duration_s = 20.0;
  c.arch.blocks = {{4, 3, 5, 2}};
  c.arch.dense_width = 8;
  c.train.max_iterations = 6;
  c.interpret.perturbations = 60;
  c.select.k = 15;
  c.seed = 11;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TRES_DIAG_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config defaults, round trip and unknown keys") {
  const PipelineConfig d = pipeline_config_from_json(Json::object());
  CHECK(d == PipelineConfig{});
  CHECK(d.dataset.num_cases == 346);
  CHECK(d.select.k == 15);
  CHECK(d.interpret.perturbations == 500);
  CHECK(d.train.max_iterations == 2000);

  const PipelineConfig t = tiny_config();
  CHECK(pipeline_config_from_json(to_json(t)) == t);

  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"sed", 1}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"select", {{"kk", 3}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"interpret", {{"perturbations", "many"}}}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(Json{{"select", {{"k", 0}}}}), ConfigError);
  CHECK_THROWS_AS(load_pipeline_config("/nonexistent/config.json"), IoError);
}

TEST_CASE("named seed streams are distinct and reproducible") {
  CHECK(dataset_seed(5) == dataset_seed(5));
  CHECK(dataset_seed(5) != dataset_seed(6));
  CHECK(init_stream(5).seed() != lime_stream(5).seed());
  CHECK(init_stream(5).seed() != dataset_seed(5));
}

TEST_CASE("generate refuses a non-empty directory and is byte-reproducible") {
  TempDir tmp("pipe_gen");
  const PipelineConfig c = tiny_config();
  const GenerateResult r = cmd_generate(c, tmp.path / "a", false);
  CHECK(r.cases == 24);
  CHECK(r.train == 18);
  CHECK(r.test == 6);
  CHECK_THROWS_AS(cmd_generate(c, tmp.path / "a", false), ConfigError);
  const auto first = tree(tmp.path / "a");
  cmd_generate(c, tmp.path / "a", true);
  CHECK(tree(tmp.path / "a") == first);
  cmd_generate(c, tmp.path / "b", false);
  CHECK(tree(tmp.path / "b") == first);

  // --force only replaces the command's own artifacts.
  write_text(tmp.path / "a" / "notes.txt", "keep");
  cmd_generate(c, tmp.path / "a", true);
  CHECK(slurp(tmp.path / "a" / "notes.txt") == "keep");
}

TEST_CASE("tiny pipeline end to end") {
  TempDir tmp("pipe_run");
  const PipelineConfig c = tiny_config();
  const ReportResult r = run_pipeline(c, tmp.path, false);
  const PathsConfig& p = c.paths;

  // One attribution per training case, and the channel list.
  std::size_t case_files = 0;
  for (const auto& e : fs::directory_iterator(tmp.path / p.attributions)) {
    case_files += e.path().filename().string().starts_with("case_");
  }
  CHECK(case_files == 18);
  CHECK(read_channel_list(tmp.path / p.attributions / kChannelsFile).size() == 38);

  const auto selected = read_channel_list(tmp.path / p.selection / kSelectedFile);
  CHECK(selected.size() == 15);
  const TrainedModel sel = load_checkpoint(tmp.path / p.selected_run / kCheckpointFile);
  CHECK(sel.channels == selected);
  CHECK(sel.arch.channels == 15);
  CHECK(load_checkpoint(tmp.path / p.full_run / kCheckpointFile).arch.channels == 38);

  CHECK(r.report.full.metrics.cases == 6);
  CHECK(r.report.iterations_full == 6);
  CHECK(r.recovery.selected == 15);
  CHECK(fs::exists(tmp.path / p.report / kReportMarkdown));
  const Json j = Json::parse(slurp(tmp.path / p.report / kReportJson));
  CHECK(j["selected_channels"] == Json(selected));

  SUBCASE("self-comparison gives zero relative errors") {
    const ReportResult self = cmd_report(c, tmp.path / p.full_run, tmp.path / p.full_run, tmp.path / p.dataset,
                                         tmp.path / p.selection, tmp.path / "self", false);
    CHECK(format_relative(self.report.sse_change) == "+0.00%");
    CHECK(format_relative(self.report.micro_f1_change) == "+0.00%");
    CHECK(format_relative(self.report.accuracy_change) == "+0.00%");
  }
  SUBCASE("rerunning a stage without --force is refused") {
    CHECK_THROWS_AS(cmd_select(c, tmp.path / p.attributions, tmp.path / p.selection, false), ConfigError);
    CHECK_NOTHROW(cmd_select(c, tmp.path / p.attributions, tmp.path / p.selection, true));
  }
  SUBCASE("k = 38 selects everything, k > P is refused") {
    PipelineConfig all = c;
    all.select.k = 38;
    CHECK(cmd_select(all, tmp.path / p.attributions, tmp.path / "all", false).ranking.selected.size() == 38);
    all.select.k = 39;
    CHECK_THROWS_AS(cmd_select(all, tmp.path / p.attributions, tmp.path / "too_many", false), ConfigError);
  }
  SUBCASE("attribution reruns are identical") {
    cmd_attribute(c, tmp.path / p.full_run, tmp.path / p.dataset, tmp.path / "again", false);
    CHECK(tree(tmp.path / "again") == tree(tmp.path / p.attributions));
  }
  SUBCASE("missing train log is reported by path") {
    fs::remove(tmp.path / p.selected_run / kTrainLogFile);
    try {
      cmd_report(c, tmp.path / p.full_run, tmp.path / p.selected_run, tmp.path / p.dataset, tmp.path / p.selection,
                 tmp.path / "r2", false);
      FAIL("expected an error");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find((tmp.path / p.selected_run / kTrainLogFile).string()) != std::string::npos);
    }
  }
  SUBCASE("runs on different splits are not compared") {
    PipelineConfig other = c;
    other.seed = 12;
    cmd_generate(other, tmp.path / "data2", false);
    cmd_train(other, tmp.path / "data2", tmp.path / "run2", std::nullopt, false);
    CHECK_THROWS_AS(cmd_report(c, tmp.path / p.full_run, tmp.path / "run2", tmp.path / p.dataset,
                               tmp.path / p.selection, tmp.path / "r3", false),
                    ValidationError);
  }
}

TEST_CASE("attribution and selection never read the test split") {
  TempDir tmp("pipe_leak");
  PipelineConfig c = tiny_config();
  c.train.max_iterations = 2;
  cmd_generate(c, tmp.path / "data", false);
  cmd_train(c, tmp.path / "data", tmp.path / "run", std::nullopt, false);

  const Dataset meta = load_dataset(tmp.path / "data", LoadOptions{std::nullopt, false, nullptr});
  std::set<std::string> test_files, train_files;
  for (std::size_t i : meta.indices(Split::test)) test_files.insert(case_file_name(meta.cases[i].case_id));
  for (std::size_t i : meta.indices(Split::train)) train_files.insert(case_file_name(meta.cases[i].case_id));
  REQUIRE(test_files.size() == 6);

  const AccessList dry = cmd_attribute(c, tmp.path / "run", tmp.path / "data", tmp.path / "att", false, true);
  CHECK_FALSE(fs::exists(tmp.path / "att"));
  std::set<std::string> read_cases;
  for (const auto& f : dry.read) {
    CHECK(test_files.count(f.filename().string()) == 0);
    if (f.parent_path().filename() == "cases") read_cases.insert(f.filename().string());
  }
  CHECK(read_cases == train_files);

  // The dry run lists exactly what the real run reads.
  const AccessList real = cmd_attribute(c, tmp.path / "run", tmp.path / "data", tmp.path / "att", false);
  CHECK(real.read == dry.read);

  const SelectResult sel = cmd_select(c, tmp.path / "att", tmp.path / "sel", false, true);
  for (const auto& f : sel.access.read) {
    CHECK(f.parent_path() == tmp.path / "att");
  }
  CHECK(sel.access.read.size() == 1 + train_files.size());
}

TEST_CASE("channel files for training") {
  TempDir tmp("pipe_channels");
  PipelineConfig c = tiny_config();
  c.train.max_iterations = 1;
  cmd_generate(c, tmp.path / "data", false);
  const auto names = channel_catalog(c.dataset.catalog);

  std::string list = "# chosen\n";
  for (std::size_t i = 0; i < 15; ++i) list += names[2 * i + 1].name + "\n";
  write_text(tmp.path / "fifteen.txt", list);
  const TrainRunResult r = cmd_train(c, tmp.path / "data", tmp.path / "r15", tmp.path / "fifteen.txt", false);
  CHECK(r.channels == 15);
  const TrainedModel m = load_checkpoint(tmp.path / "r15" / kCheckpointFile);
  CHECK(m.arch.channels == 15);
  CHECK(m.norm.mean.size() == 15);
  CHECK(m.channels.front() == names[1].name);

  write_text(tmp.path / "empty.txt", "\n# nothing\n");
  CHECK_THROWS_AS(cmd_train(c, tmp.path / "data", tmp.path / "r0", tmp.path / "empty.txt", false), ValidationError);

  write_text(tmp.path / "unknown.txt", names[0].name + "\nno_such_sensor\n");
  try {
    cmd_train(c, tmp.path / "data", tmp.path / "ru", tmp.path / "unknown.txt", false);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("no_such_sensor") != std::string::npos);
  }
}

TEST_CASE("attribution rejects an MLP checkpoint") {
  TempDir tmp("pipe_mlp");
  PipelineConfig c = tiny_config();
  c.arch.kind = ArchKind::mlp_baseline;
  c.train.max_iterations = 1;
  cmd_generate(c, tmp.path / "data", false);
  cmd_train(c, tmp.path / "data", tmp.path / "run", std::nullopt, false);
  CHECK_THROWS_AS(cmd_attribute(c, tmp.path / "run", tmp.path / "data", tmp.path / "att", false), UnsupportedError);
}

TEST_CASE("command line exit codes") {
  TempDir tmp("pipe_cli");
  fs::create_directories(tmp.path);
  PipelineConfig c = tiny_config();
  c.train.max_iterations = 2;
  write_text(tmp.path / "cfg.json", to_json(c).dump());
  const std::string cfg = " --config " + (tmp.path / "cfg.json").string();
  const std::string data = (tmp.path / "data").string();

  CHECK(run_cli("generate" + cfg + " --cases 10 --out " + data) == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(tmp.path / "data" / "cases")) files += e.is_regular_file();
  CHECK(files == 10);
  CHECK(run_cli("generate" + cfg + " --cases 10 --out " + data) == 2);
  CHECK(run_cli("generate" + cfg + " --cases 10 --force --out " + data) == 0);

  CHECK(run_cli("") == 2);
  CHECK(run_cli("generate --no-such-flag") == 2);
  CHECK(run_cli("generate --config " + (tmp.path / "missing.json").string()) == 4);
  write_text(tmp.path / "bad.json", "{\"threads\": 1, \"colour\": 2}");
  CHECK(run_cli("generate --config " + (tmp.path / "bad.json").string() + " --out " + data + "x") == 2);
  CHECK(run_cli("train" + cfg + " --data " + (tmp.path / "nothing").string() + " --out " +
                (tmp.path / "r").string()) == 4);

  PipelineConfig hot = c;
  hot.train.alpha = 1e200;
  write_text(tmp.path / "hot.json", to_json(hot).dump());
  CHECK(run_cli("train --config " + (tmp.path / "hot.json").string() + " --data " + data + " --out " +
                (tmp.path / "hot").string()) == 3);

  CHECK(run_cli("train" + cfg + " --data " + data + " --out " + (tmp.path / "run").string()) == 0);
  CHECK(run_cli("select" + cfg + " --k 0 --attributions " + (tmp.path / "att").string()) == 2);
}

TEST_CASE("the whole pipeline is byte-reproducible") {
  TempDir a("pipe_det_a"), b("pipe_det_b");
  PipelineConfig c = tiny_config();
  c.train.max_iterations = 3;
  run_pipeline(c, a.path, false);
  c.threads = 3;
  c.train.threads = 2;
  run_pipeline(c, b.path, false);
  CHECK(slurp(a.path / c.paths.report / kReportJson) == slurp(b.path / c.paths.report / kReportJson));
  CHECK(tree(a.path / c.paths.attributions) == tree(b.path / c.paths.attributions));
  CHECK(tree(a.path / c.paths.selection) == tree(b.path / c.paths.selection));
}
