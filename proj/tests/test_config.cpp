#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cf/config.hpp"
#include "cf/error.hpp"
#include "doctest.h"

using namespace cf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("cf_config_" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

fs::path write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
  return p;
}

}  // namespace

TEST_CASE("defaults load without a file and derive the seeds") {
  const RunConfig cfg = load_config(std::nullopt, {});
  CHECK(cfg.run_name == "run");
  CHECK(cfg.seed == 0);
  CHECK(cfg.train.seed == cfg.seed);
  CHECK(cfg.sample.seed == cfg.seed);
  CHECK(!cfg.sample.cfg_interval.has_value());
  CHECK(cfg.harness.cells.size() == 6);
  CHECK(cfg.harness.s_evals == std::vector<Index>{1, 2, 4, 8});
  CHECK(cfg.run_dir() == fs::path("runs") / "run");

  const RunConfig seeded = load_config(std::nullopt, {{"seed", "7"}});
  CHECK(seeded.seed == 7);
  CHECK(seeded.train.seed == 7);
  CHECK(seeded.sample.seed == 7);
}

TEST_CASE("config files parse comments, spacing, and values") {
  TempDir tmp;
  const fs::path file = write_file(tmp.path / "run.cfg",
                                   "# a comment line\n"
                                   "\n"
                                   "run_name = demo   # trailing comment\n"
                                   "model.dim=32\n"
                                   "  train.gamma =  0.8  \n"
                                   "model.pos_embed = learnable\n"
                                   "model.qk_norm = false\n"
                                   "sample.variance = beta\n");
  const RunConfig cfg = load_config(file, {});
  CHECK(cfg.run_name == "demo");
  CHECK(cfg.model.dim == 32);
  CHECK(cfg.train.gamma == 0.8);
  CHECK(cfg.model.pos_embed == PosEmbedKind::kLearnable);
  CHECK(cfg.model.qk_norm == false);
  CHECK(cfg.sample.variance == ReverseVariance::kBeta);
}

TEST_CASE("overrides win over file values") {
  TempDir tmp;
  const fs::path file = write_file(tmp.path / "run.cfg", "train.gamma = 0.8\nseed = 3\n");
  const RunConfig cfg = load_config(file, {{"train.gamma", "0.7"}, {"run_name", "over"}});
  CHECK(cfg.train.gamma == 0.7);
  CHECK(cfg.seed == 3);
  CHECK(cfg.run_name == "over");
}

TEST_CASE("rendered configs round trip exactly") {
  const RunConfig cfg = load_config(std::nullopt, {{"train.base_lr", "0.00037"},
                                                   {"schedule.beta_end", "0.0215"},
                                                   {"model.pos_embed", "learnable"},
                                                   {"sample.use_cache", "false"},
                                                   {"seed", "12345"}});
  const std::string text = render_config(cfg);
  TempDir tmp;
  const RunConfig again = load_config(write_file(tmp.path / "resolved.cfg", text), {});
  CHECK(render_config(again) == text);
  CHECK(again.train.base_lr == cfg.train.base_lr);
  CHECK(again.beta_end == cfg.beta_end);

  write_resolved_config(cfg, tmp.path / "out");
  std::ifstream in(tmp.path / "out" / "config.resolved");
  std::string from_disk((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(from_disk == text);
}

TEST_CASE("parse errors name the key and expected type") {
  CHECK_THROWS_WITH_AS(load_config(std::nullopt, {{"nope", "1"}}), "unknown config key 'nope'",
                       ParameterError);
  CHECK_THROWS_WITH_AS(load_config(std::nullopt, {{"train.gamma", "abc"}}),
                       "config key 'train.gamma': expected real, got 'abc'", ParameterError);
  CHECK_THROWS_WITH_AS(load_config(std::nullopt, {{"model.dim", "12x"}}),
                       "config key 'model.dim': expected integer, got '12x'", ParameterError);
  CHECK_THROWS_WITH_AS(load_config(std::nullopt, {{"seed", "-4"}}),
                       "config key 'seed': expected unsigned integer, got '-4'", ParameterError);
  CHECK_THROWS_WITH_AS(load_config(std::nullopt, {{"model.qk_norm", "maybe"}}),
                       "config key 'model.qk_norm': expected boolean, got 'maybe'",
                       ParameterError);
  CHECK_THROWS_WITH_AS(
      load_config(std::nullopt, {{"sample.variance", "gauss"}}),
      "config key 'sample.variance': expected one of posterior|beta, got 'gauss'",
      ParameterError);

  TempDir tmp;
  const fs::path bad = write_file(tmp.path / "bad.cfg", "train.gamma 0.8\n");
  CHECK_THROWS_AS(load_config(bad, {}), ParameterError);
  CHECK_THROWS_AS(load_config(fs::path(tmp.path / "absent.cfg"), {}), IoError);
}

TEST_CASE("validation rejects out-of-range resolved values") {
  CHECK_THROWS_AS(load_config(std::nullopt, {{"train.gamma", "1.5"}}), ParameterError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"schedule.steps", "0"}}), ParameterError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"schedule.beta_start", "0.5"},
                                             {"schedule.beta_end", "0.1"}}),
                  ParameterError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"run_name", "a/b"}}), ParameterError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"sample.s_eval", "100000"}}), ParameterError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"sample.cfg_t_low", "5"},
                                             {"sample.cfg_t_high", "3"}}),
                  ParameterError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"sample.cfg_t_high", "1000"}}), ParameterError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"harness.eval_class", "99"}}), ParameterError);
  CHECK_THROWS_AS(load_config(std::nullopt, {{"harness.cells", "s=0"}}), ParameterError);
}

TEST_CASE("guidance interval fields arm the sample request") {
  const RunConfig off = load_config(std::nullopt, {});
  CHECK(!off.sample.cfg_interval.has_value());
  const RunConfig on = load_config(std::nullopt, {{"sample.cfg_t_low", "10"},
                                                  {"sample.cfg_t_high", "90"}});
  REQUIRE(on.sample.cfg_interval.has_value());
  CHECK(on.sample.cfg_interval->first == 10);
  CHECK(on.sample.cfg_interval->second == 90);
  // t_low zero with a positive t_high still arms the window.
  const RunConfig low0 = load_config(std::nullopt, {{"sample.cfg_t_high", "90"}});
  REQUIRE(low0.sample.cfg_interval.has_value());
  CHECK(low0.sample.cfg_interval->first == 0);
}

TEST_CASE("cell and index lists parse their grammar") {
  const std::vector<AblationCell> cells = parse_cells(" s=1 ,gamma=0.9, s=16 ");
  REQUIRE(cells.size() == 3);
  CHECK(cells[0].name == "s=1");
  CHECK(cells[0].fixed_s == 1);
  CHECK(cells[1].name == "gamma=0.9");
  CHECK(cells[1].fixed_s == 0);
  CHECK(cells[1].gamma == 0.9);
  CHECK(cells[2].fixed_s == 16);
  CHECK_THROWS_AS(parse_cells("s=1,bogus"), ParameterError);
  CHECK_THROWS_AS(parse_cells("gamma=1.2"), ParameterError);
  CHECK_THROWS_AS(parse_cells(""), ParameterError);

  CHECK(parse_index_list("1, 2,8") == std::vector<Index>{1, 2, 8});
  CHECK_THROWS_AS(parse_index_list(" , "), ParameterError);
  CHECK_THROWS_AS(parse_index_list("3,x"), ParameterError);
}
