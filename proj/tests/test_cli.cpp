#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <map>
#include <sstream>

#include "edgeseg/experiment.hpp"
#include "edgeseg/util.hpp"
#include "support.hpp"

using namespace edgeseg;
using testsupport::TempDir;

namespace {

struct CliResult {
  int code = -1;
  std::string out, err;
};

CliResult run(const TempDir& tmp, const std::string& args) {
  const fs::path o = tmp.path() / "stdout.txt", e = tmp.path() / "stderr.txt";
  const std::string cmd = std::string("'") + EDGESEG_CLI_PATH + "' " + args + " > '" + o.string() + "' 2> '" + e.string() + "'";
  const int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(o);
  r.err = read_file(e);
  return r;
}

std::string last_line(const std::string& s) {
  std::istringstream in(s);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  return last;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = read_file(e.path());
  return files;
}

fs::path write_tiny_config(const TempDir& tmp) {
  const fs::path f = tmp.path() / "tiny.json";
  write_file_atomic(f, R"({"image_size":[16,16],
 "arch":{"encoder_channels":[2,3],"bottleneck_channels":4},
 "train":{"epochs":1,"batch_size":4,"micro_batch":4},
 "finetune":{"epochs":1},
 "selections":10,
 "synthetic_plan":{"source_count":10,"target_count":14}})");
  return f;
}

std::size_t csv_rows(const fs::path& file) {
  std::istringstream in(read_file(file));
  std::size_t n = 0;
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) ++n;
  return n - 1;
}

}  // namespace

TEST_CASE("prepare --synthetic is byte-identical across runs") {
  TempDir tmp;
  const fs::path cfg = write_tiny_config(tmp);
  for (const char* d : {"a", "b"}) {
    const auto r = run(tmp, "prepare --synthetic --seed 7 --config '" + cfg.string() + "' --out '" + (tmp.path() / d).string() + "'");
    REQUIRE_MESSAGE(r.code == 0, r.err);
  }
  auto a = snapshot(tmp.path() / "a"), b = snapshot(tmp.path() / "b");
  // the written config records its own output directory
  a.erase("config.json");
  b.erase("config.json");
  REQUIRE(a.size() > 40);
  CHECK(a == b);
}

TEST_CASE("prepare on a 20-image dataset labels 2") {
  TempDir tmp;
  testsupport::make_dataset(tmp.path() / "em", "source", 20, 3, {16, 16});
  fs::remove(tmp.path() / "em" / kManifestFileName);
  testsupport::make_dataset(tmp.path() / "tgt", "target", 12, 4, {16, 16});
  fs::remove(tmp.path() / "tgt" / kManifestFileName);
  const fs::path cfg = tmp.path() / "cfg.json";
  write_file_atomic(cfg, R"({"sources":[")" + (tmp.path() / "em").string() + R"("],"target":")" +
                             (tmp.path() / "tgt").string() + R"(","image_size":[16,16],"arch":{"encoder_channels":[2,3],"bottleneck_channels":4}})");
  const auto r = run(tmp, "prepare --seed 1 --config '" + cfg.string() + "' --out '" + (tmp.path() / "out").string() + "'");
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const SplitManifest m = SplitManifest::load(tmp.path() / "em" / kManifestFileName);
  CHECK(m.labelled_ids.size() == 2);
  CHECK(m.unlabelled_ids.size() == 18);
  const SplitManifest t = SplitManifest::load(tmp.path() / "tgt" / kManifestFileName);
  CHECK(t.labelled_ids.size() == 12);
}

TEST_CASE("configuration errors exit with code 2") {
  TempDir tmp;
  testsupport::make_dataset(tmp.path() / "nomask", "source", 4, 3, {16, 16});
  fs::remove_all(tmp.path() / "nomask" / "masks");
  fs::remove(tmp.path() / "nomask" / kManifestFileName);
  testsupport::make_dataset(tmp.path() / "tgt", "target", 12, 4, {16, 16});
  const fs::path cfg = tmp.path() / "cfg.json";
  write_file_atomic(cfg, R"({"sources":[")" + (tmp.path() / "nomask").string() + R"("],"target":")" +
                             (tmp.path() / "tgt").string() + R"(","image_size":[16,16],"arch":{"encoder_channels":[2,3],"bottleneck_channels":4}})");

  SUBCASE("missing masks directory names the path") {
    const auto r = run(tmp, "prepare --config '" + cfg.string() + "' --out '" + (tmp.path() / "out").string() + "'");
    CHECK(r.code == 2);
    CHECK(r.err.find("masks") != std::string::npos);
    CHECK(r.err.find((tmp.path() / "nomask").string()) != std::string::npos);
  }
  SUBCASE("unknown method lists the valid ones") {
    const auto r = run(tmp, "experiment --method bogus --config '" + cfg.string() + "'");
    CHECK(r.code == 2);
    for (const char* m : {"supervised", "edge_joint", "entropy", "consistency", "rotation"})
      CHECK(r.err.find(m) != std::string::npos);
  }
  SUBCASE("missing manifest points to prepare") {
    const auto r = run(tmp, "experiment --config '" + cfg.string() + "' --out '" + (tmp.path() / "out").string() + "'");
    CHECK(r.code == 2);
    CHECK(r.err.find("prepare") != std::string::npos);
  }
  SUBCASE("unknown config key") {
    write_file_atomic(cfg, R"({"sources":[],"bogus":1})");
    const auto r = run(tmp, "prepare --config '" + cfg.string() + "'");
    CHECK(r.code == 2);
    CHECK(r.err.find("bogus") != std::string::npos);
  }
  SUBCASE("missing config file") {
    const auto r = run(tmp, "prepare --config '" + (tmp.path() / "nope.json").string() + "'");
    CHECK(r.code == 2);
  }
  SUBCASE("unknown subcommand") { CHECK(run(tmp, "frobnicate").code == 2); }
}

TEST_CASE("experiment, resume and report end to end") {
  TempDir tmp;
  const fs::path cfg = write_tiny_config(tmp), out = tmp.path() / "out";
  REQUIRE(run(tmp, "prepare --synthetic --seed 5 --config '" + cfg.string() + "' --out '" + out.string() + "'").code == 0);

  const auto sup = run(tmp, "experiment --method supervised --seed 5 --out '" + out.string() + "'");
  REQUIRE_MESSAGE(sup.code == 0, sup.err);
  const fs::path sup_run = last_line(sup.out);
  CHECK(csv_rows(sup_run / "results.csv") == 50);
  CHECK(fs::exists(sup_run / "history.csv"));
  CHECK(fs::exists(sup_run / "checkpoint.bin"));

  const auto joint = run(tmp, "experiment --method edge_joint --seed 5 --workers 2 --out '" + out.string() + "'");
  REQUIRE_MESSAGE(joint.code == 0, joint.err);
  const fs::path joint_run = last_line(joint.out);
  CHECK(joint_run != sup_run);
  CHECK(csv_rows(joint_run / "results.csv") == 50);
  CHECK(ExperimentConfig::load(joint_run / "config.json").unlabelled_fraction == 0.6);
  CHECK(ExperimentConfig::load(sup_run / "config.json").unlabelled_fraction == 0.0);

  SUBCASE("an interrupted run resumes to the same results") {
    ExperimentConfig c = ExperimentConfig::load(sup_run / "config.json");
    c.out = tmp.path() / "resume";
    fs::create_directories(c.out);
    std::ostringstream log;
    const fs::path partial = cmd_experiment(c, log, {.max_new_episodes = 17});
    CHECK(csv_rows(partial / "results.csv") == 17);
    const auto r = run(tmp, "experiment --config '" + (sup_run / "config.json").string() + "' --out '" + c.out.string() + "'");
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(r.out.find("33 of 50 episodes pending") != std::string::npos);
    CHECK(read_file(partial / "results.csv") == read_file(sup_run / "results.csv"));
  }

  SUBCASE("a rerun reuses the checkpoint and evaluates nothing") {
    const auto r = run(tmp, "experiment --method supervised --seed 5 --out '" + out.string() + "'");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("reusing checkpoint") != std::string::npos);
    CHECK(r.out.find("evaluating 0") != std::string::npos);
  }

  SUBCASE("report renders both methods and is pure") {
    const auto before = snapshot(out);
    const fs::path rep = tmp.path() / "report";
    const auto r = run(tmp, "report '" + sup_run.string() + "' '" + joint_run.string() + "' --out '" + rep.string() + "'");
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(snapshot(out) == before);

    std::string table;
    int overlays = 0, curves = 0;
    for (const auto& e : fs::directory_iterator(rep)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("comparison_", 0) == 0) table = read_file(e.path());
      if (name.rfind("overlay_", 0) == 0) ++overlays;
      if (name.rfind("shot_curves_", 0) == 0 && e.path().extension() == ".png") ++curves;
    }
    CHECK(table.find("| supervised |") != std::string::npos);
    CHECK(table.find("| edge_joint |") != std::string::npos);
    CHECK(overlays == 2);
    CHECK(curves == 1);

    const auto first = snapshot(rep);
    REQUIRE(run(tmp, "report '" + sup_run.string() + "' '" + joint_run.string() + "' --out '" + rep.string() + "'").code == 0);
    CHECK(snapshot(rep) == first);
  }

  SUBCASE("report on a missing run is a runtime error") {
    const auto r = run(tmp, "report '" + (tmp.path() / "nothing").string() + "' --out '" + (tmp.path() / "r2").string() + "'");
    CHECK(r.code != 0);
  }
}
