#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

#include "gsrec/cli/cli_main.hpp"
#include "gsrec/cli/commands.hpp"
#include "gsrec/cli/run_config.hpp"
#include "gsrec/core/rng.hpp"
#include "gsrec/theory/convergence.hpp"

using nlohmann::json;
using namespace gsrec;
using Catch::Matchers::ContainsSubstring;

namespace {

namespace fs = std::filesystem;

std::string fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("gsrec_cli_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// Small interaction log on disk: random-walk sequences over a tiny catalog,
// written in the whitespace "user item" format.
std::string write_corpus(const std::string& tag, int64_t n_users,
                         int64_t catalog, uint64_t seed) {
  Rng rng = Rng::rooted(seed);
  fs::path p = fs::temp_directory_path() / ("gsrec_corpus_" + tag + ".txt");
  std::ofstream out(p);
  REQUIRE(out.good());
  for (int64_t u = 0; u < n_users; ++u) {
    int64_t len = 5 + static_cast<int64_t>(rng.uniform_index(8));
    for (int64_t i = 0; i < len; ++i) {
      out << "u" << u << " i" << (1 + rng.uniform_index(
                                          static_cast<uint64_t>(catalog)))
          << "\n";
    }
  }
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// Overrides shared by the end-to-end pipeline cases: a model small enough
// to train in milliseconds.
json tiny_config(const std::string& corpus, const std::string& out_dir) {
  json j;
  j["dataset"] = {{"path", corpus}, {"kcore", 3}};
  j["split"] = {{"n_validation_users", 8}, {"seed", 5}};
  j["model"] = {{"max_seq_len", 8}, {"embed_dim", 8},   {"n_blocks", 1},
                {"n_heads", 2},     {"dropout_rate", 0.1}};
  j["loss"] = {{"kind", "gbce"}, {"k", 2}, {"t", 0.75}};
  j["train"] = {{"max_epochs", 3}, {"batch_size", 16}, {"lr", 3e-3},
                {"seed", 9}};
  j["output_dir"] = out_dir;
  return j;
}

}  // namespace

TEST_CASE("override parsing handles types, paths, and malformed input") {
  json j = json::object();
  cli::apply_override(j, "loss.t=0.9");
  cli::apply_override(j, "loss.kind=bce");
  cli::apply_override(j, "train.max_epochs=5");
  cli::apply_override(j, "eval.exclude_seen=false");
  cli::apply_override(j, "eval.cutoffs=[1,5,20]");
  cli::apply_override(j, "output_dir=runs/x");
  CHECK(j["loss"]["t"] == 0.9);
  CHECK(j["loss"]["kind"] == "bce");
  CHECK(j["loss"]["t"].is_number_float());
  CHECK(j["train"]["max_epochs"] == 5);
  CHECK(j["train"]["max_epochs"].is_number_integer());
  CHECK(j["eval"]["exclude_seen"] == false);
  CHECK(j["eval"]["cutoffs"] == json({1, 5, 20}));
  CHECK(j["output_dir"] == "runs/x");

  cli::apply_override(j, "loss.t=1");
  CHECK(j["loss"]["t"] == 1);
  CHECK(j["loss"]["kind"] == "bce");

  CHECK_THROWS_WITH(cli::apply_override(j, "loss.t"),
                    ContainsSubstring("override"));
  CHECK_THROWS_WITH(cli::apply_override(j, "=5"),
                    ContainsSubstring("override"));
  CHECK_THROWS_WITH(cli::apply_override(j, "loss..t=1"),
                    ContainsSubstring("empty key segment"));
  CHECK_THROWS_WITH(cli::apply_override(j, "output_dir.sub=1"),
                    ContainsSubstring("non-object"));
}

TEST_CASE("run config defaults and strict unknown-key errors") {
  json base = {{"output_dir", "x"}};
  cli::RunConfig cfg = cli::run_config_from_json(base);
  CHECK(cfg.dataset.path.empty());
  CHECK(cfg.dataset.format == "bert4rec-txt");
  CHECK(cfg.dataset.kcore == 5);
  CHECK(cfg.split.n_validation_users == 256);
  CHECK(cfg.split.seed == 1);
  CHECK(cfg.model.max_seq_len == 200);
  CHECK(cfg.model.embed_dim == 64);
  CHECK(cfg.loss.kind == LossSpec::Kind::GBCE);
  CHECK(cfg.loss.k == 1);
  CHECK(cfg.loss.t == 1.0);
  CHECK(cfg.train.lr == 1e-3);
  CHECK(cfg.eval.cutoffs == std::vector<int64_t>{1, 10});
  CHECK(cfg.eval.exclude_seen);
  CHECK(cfg.theory.steps == 0);
  CHECK(cfg.sweep.k_grid == std::vector<int64_t>{1, 4, 16, 64, 256});
  CHECK(cfg.sweep.t_grid == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  CHECK(cfg.output_dir == "x");

  auto bad = [&](json j, const char* needle) {
    CHECK_THROWS_WITH(cli::run_config_from_json(j), ContainsSubstring(needle));
  };
  bad({{"outptu_dir", "x"}}, "outptu_dir");
  bad({{"output_dir", "x"}, {"model", {{"embed_dims", 64}}}},
      "model.embed_dims");
  bad({{"output_dir", "x"}, {"dataset", {{"pth", "f"}}}}, "dataset.pth");
  bad({{"output_dir", "x"}, {"loss", {{"beta", 0.5}}}}, "loss.beta");
  bad({{"output_dir", "x"}, {"train", {{"lr_decay", 0.1}}}}, "train.lr_decay");
  bad({{"output_dir", "x"}, {"eval", {{"top_k", 5}}}}, "eval.top_k");
  bad(json::array({1, 2}), "top level");
  bad({{"output_dir", "x"}, {"model", 3}}, "'model' must be an object");

  bad(json::object(), "output_dir");
  bad({{"output_dir", "x"}, {"eval", {{"cutoffs", json::array()}}}},
      "cutoffs");
  bad({{"output_dir", "x"}, {"eval", {{"cutoffs", {0, 10}}}}}, "cutoffs");
  bad({{"output_dir", "x"}, {"dataset", {{"kcore", 0}}}}, "kcore");
  bad({{"output_dir", "x"}, {"dataset", {{"format", "parquet"}}}}, "parquet");
  bad({{"output_dir", "x"}, {"loss", {{"kind", "mse"}}}}, "mse");
  bad({{"output_dir", "x"}, {"split", {{"n_validation_users", -1}}}},
      "n_validation_users");
  bad({{"output_dir", "x"}, {"theory", {{"steps", -1}}}}, "theory.steps");
  bad({{"output_dir", "x"}, {"sweep", {{"k_grid", json::array()}}}}, "sweep");
  bad({{"output_dir", "x"}, {"sweep", {{"t_grid", {0.0, 1.5}}}}},
      "t_grid");
}

TEST_CASE("run config json round-trips through parse and serialize") {
  json base = {{"output_dir", "runs/demo"},
               {"dataset", {{"path", "d.txt"}, {"format", "csv-with-time"},
                            {"kcore", 2}}},
               {"split", {{"n_validation_users", 12}, {"seed", 77}}},
               {"model", {{"embed_dim", 16}, {"n_heads", 4}}},
               {"loss", {{"kind", "ssm"}, {"k", 8}}},
               {"train", {{"optimizer", "sgd"}, {"lr", 0.5}}},
               {"eval", {{"cutoffs", {5}}, {"exclude_seen", false}}},
               {"theory", {{"steps", 100}}},
               {"sweep", {{"k_grid", {1, 2}}, {"t_grid", {0.5}}}}};
  cli::RunConfig cfg = cli::run_config_from_json(base);
  CHECK(cfg.dataset.format == "csv-with-time");
  CHECK(cfg.loss.kind == LossSpec::Kind::SSM);
  CHECK(cfg.train.optimizer == "sgd");

  json out = cli::run_config_json(cfg, 42);
  CHECK(out["model"]["catalog_size"] == 42);
  cli::RunConfig back = cli::run_config_from_json(out);
  CHECK(cli::run_config_json(back, 42) == out);

  json bare = cli::run_config_json(cfg);
  CHECK(!bare["model"].contains("catalog_size"));
  CHECK(cli::run_config_json(cli::run_config_from_json(bare)) == bare);
}

TEST_CASE("verify-theory emits the oracle grid with tight agreement") {
  cli::RunConfig cfg;
  cfg.output_dir = fresh_dir("theory");
  double max_err = cli::run_verify_theory(cfg);
  CHECK(max_err < 1e-6);

  auto lines = read_lines(cfg.output_dir + "/theory.csv");
  REQUIRE(lines.size() == 1 + 8 * 5 * 3);
  CHECK(lines[0] ==
        "p,alpha,beta,closed_form,numeric_min,empirical_sigma,abs_error");

  int checked = 0;
  for (size_t i = 1; i < lines.size(); ++i) {
    auto f = split_csv(lines[i]);
    REQUIRE(f.size() == 7);
    double p = std::stod(f[0]);
    double alpha = std::stod(f[1]);
    double beta = std::stod(f[2]);
    double closed = std::stod(f[3]);
    double numeric = std::stod(f[4]);
    double err = std::stod(f[6]);
    CHECK(f[5] == "nan");  // steps=0 leaves the empirical column unfilled
    CHECK(closed == theory::converged_sigmoid(p, alpha, beta));
    CHECK(numeric == theory::numeric_minimizer(p, alpha, beta));
    CHECK(err == std::abs(closed - numeric));
    CHECK(err < 1e-6);
    ++checked;
  }
  CHECK(checked == 120);
  CHECK(fs::exists(cfg.output_dir + "/config.json"));
}

TEST_CASE("verify-theory empirical column tracks the closed form", "[slow]") {
  cli::RunConfig cfg;
  cfg.output_dir = fresh_dir("theory_emp");
  cfg.theory.steps = 40000;
  cli::run_verify_theory(cfg);

  auto lines = read_lines(cfg.output_dir + "/theory.csv");
  REQUIRE(lines.size() == 121);
  int close_rows = 0;
  for (size_t i = 1; i < lines.size(); ++i) {
    auto f = split_csv(lines[i]);
    double p = std::stod(f[0]);
    double alpha = std::stod(f[1]);
    double closed = std::stod(f[3]);
    double emp = std::stod(f[5]);
    CHECK(std::isfinite(emp));
    CHECK(emp > 0.0);
    CHECK(emp < 1.0);
    // Well-conditioned rows reach the fixed point inside the step budget;
    // tiny alpha*p products move too slowly to test here.
    if (alpha >= 0.1 && p >= 0.1 && p <= 0.9) {
      CHECK_THAT(emp, Catch::Matchers::WithinAbs(closed, 0.05));
      ++close_rows;
    }
  }
  CHECK(close_rows == 45);
}

TEST_CASE("prepare-data writes a reproducible split manifest") {
  std::string corpus = write_corpus("prep", 40, 15, 21);
  json j = tiny_config(corpus, fresh_dir("prep"));
  cli::RunConfig cfg = cli::run_config_from_json(j);
  cli::run_prepare_data(cfg);

  std::string manifest_path = cfg.output_dir + "/split.json";
  REQUIRE(fs::exists(manifest_path));
  json manifest = json::parse(slurp(manifest_path));
  CHECK(manifest["items"] == 15);
  CHECK(manifest["validation_seed"] == 5);
  CHECK(manifest["validation_users"].size() == 8);
  CHECK(manifest["users"].get<int64_t>() > 0);
  CHECK(manifest["interactions"].get<int64_t>() >
        manifest["train_interactions"].get<int64_t>());

  json cfg_round = json::parse(slurp(cfg.output_dir + "/config.json"));
  CHECK(cfg_round["dataset"]["path"] == corpus);
  CHECK(cfg_round["model"]["catalog_size"] == 15);

  std::string again = slurp(manifest_path);
  cli::run_prepare_data(cfg);
  CHECK(slurp(manifest_path) == again);
}

TEST_CASE("train then evaluate then diagnose chain through one run directory") {
  std::string corpus = write_corpus("pipe", 40, 15, 22);
  json j = tiny_config(corpus, fresh_dir("pipe"));
  cli::RunConfig cfg = cli::run_config_from_json(j);

  trainer::TrainRecord rec = cli::run_train(cfg);
  CHECK(rec.epochs.size() == 3);
  CHECK(fs::exists(cfg.output_dir + "/best.bin"));
  CHECK(fs::exists(cfg.output_dir + "/train_record.csv"));
  json full = json::parse(slurp(cfg.output_dir + "/config.json"));
  CHECK(full["model"]["catalog_size"] == 15);
  CHECK(full["train"]["max_epochs"] == 3);
  CHECK(full["dataset"]["path"] == corpus);

  eval::RankReport rep = cli::run_evaluate(cfg);
  json er = json::parse(slurp(cfg.output_dir + "/eval_report.json"));
  CHECK(er["ndcg_at_10"] == rep.ndcg_at_10);
  CHECK(er["users"] == rep.users.size());
  CHECK(er["checkpoint_epoch"] == rec.best_epoch);
  REQUIRE(er["cutoffs"].size() == 2);
  CHECK(er["cutoffs"][0]["k"] == 1);
  CHECK(er["cutoffs"][0]["recall"] == rep.recall_at_1);
  CHECK(er["cutoffs"][1]["k"] == 10);
  CHECK(er["cutoffs"][1]["recall"] == rep.recall_at_10);
  CHECK(er["cutoffs"][1]["precision"].get<double>() ==
        rep.recall_at_10 / 10.0);
  CHECK(fs::exists(cfg.output_dir + "/eval_users.csv"));

  diag::OverconfidenceReport dr = cli::run_diagnose(cfg, "");
  CHECK(dr.users.size() == rep.users.size());
  json dj = json::parse(slurp(cfg.output_dir + "/diag_report.json"));
  CHECK(dj["probability_kind"] == "sigmoid");
  CHECK(dj["users"] == dr.users.size());
  auto cal = read_lines(cfg.output_dir + "/calibration.csv");
  CHECK(cal[0] == "k,precision,mean_probability,theory_overlay");
  auto rp = read_lines(cfg.output_dir + "/rank_probability.csv");
  CHECK(rp[0] == "rank,probability");

  // Single-user view goes through the same artifacts.
  std::string one_user = dr.users[0].user;
  diag::OverconfidenceReport du = cli::run_diagnose(cfg, one_user);
  REQUIRE(du.users.size() == 1);
  CHECK(du.users[0].rank == dr.users[0].rank);
  CHECK_THROWS_WITH(cli::run_diagnose(cfg, "nobody"),
                    ContainsSubstring("nobody"));
}

TEST_CASE("evaluate without a checkpoint names the missing artifact") {
  std::string corpus = write_corpus("nock", 30, 15, 23);
  json j = tiny_config(corpus, fresh_dir("nock"));
  cli::RunConfig cfg = cli::run_config_from_json(j);
  CHECK_THROWS_WITH(cli::run_evaluate(cfg),
                    ContainsSubstring("run the train subcommand first"));
}

TEST_CASE("checkpoint model guard rejects a mismatched config") {
  std::string corpus = write_corpus("guard", 40, 15, 24);
  json j = tiny_config(corpus, fresh_dir("guard"));
  j["train"]["max_epochs"] = 1;
  cli::RunConfig cfg = cli::run_config_from_json(j);
  cli::run_train(cfg);

  cli::RunConfig wrong = cfg;
  wrong.model.embed_dim = 16;
  CHECK_THROWS_WITH(cli::run_evaluate(wrong),
                    ContainsSubstring("different model"));
  wrong = cfg;
  wrong.model.max_seq_len = 16;
  CHECK_THROWS_WITH(cli::run_diagnose(wrong, ""),
                    ContainsSubstring("different model"));
}

TEST_CASE("sweep trains the grid and emits the ndcg matrix") {
  std::string corpus = write_corpus("sweep", 40, 15, 25);
  json j = tiny_config(corpus, fresh_dir("sweep"));
  j["train"]["max_epochs"] = 2;
  j["sweep"] = {{"k_grid", {1, 2}}, {"t_grid", {0.0, 1.0}}};
  cli::RunConfig cfg = cli::run_config_from_json(j);

  auto matrix = cli::run_sweep(cfg, 1);
  REQUIRE(matrix.size() == 2);
  REQUIRE(matrix[0].size() == 2);
  for (const auto& rowv : matrix)
    for (double v : rowv) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }

  auto lines = read_lines(cfg.output_dir + "/sweep.csv");
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "k,t=0,t=1");
  auto row0 = split_csv(lines[1]);
  auto row1 = split_csv(lines[2]);
  CHECK(row0[0] == "1");
  CHECK(row1[0] == "2");
  CHECK(std::stod(row0[1]) == matrix[0][0]);
  CHECK(std::stod(row1[2]) == matrix[1][1]);

  // Each grid point leaves a full self-describing run directory behind.
  for (const char* point : {"k1_t0", "k1_t1", "k2_t0", "k2_t1"}) {
    fs::path p = fs::path(cfg.output_dir) / "sweep" / point;
    CHECK(fs::exists(p / "best.bin"));
    CHECK(fs::exists(p / "train_record.csv"));
    json pc = json::parse(slurp((p / "config.json").string()));
    CHECK(pc["loss"]["kind"] == "gbce");
  }
  json pc = json::parse(
      slurp((fs::path(cfg.output_dir) / "sweep" / "k2_t1" / "config.json")
                .string()));
  CHECK(pc["loss"]["k"] == 2);
  CHECK(pc["loss"]["t"] == 1.0);

  CHECK_THROWS_WITH(cli::run_sweep(cfg, 0), ContainsSubstring("--jobs"));

  // The default grid's larger k values cannot be sampled from a 15-item
  // catalog; the first offending point is named.
  cli::RunConfig big = cfg;
  big.sweep = cli::SweepConfig{};
  CHECK_THROWS_WITH(cli::run_sweep(big, 1),
                    ContainsSubstring("k=16 needs a catalog of at least 17"));
}

TEST_CASE("cli entry point maps outcomes to exit codes") {
  std::string corpus = write_corpus("main", 40, 15, 26);
  std::string out = fresh_dir("main");

  json j = tiny_config(corpus, out);
  std::string cfg_path = out + "_config.json";
  {
    std::ofstream f(cfg_path);
    f << j.dump(2);
  }

  CHECK(cli::cli_main({"--help"}) == 0);
  CHECK(cli::cli_main({}) != 0);                    // subcommand required
  CHECK(cli::cli_main({"frobnicate"}) != 0);        // unknown subcommand
  CHECK(cli::cli_main({"train", "--config", "/tmp/gsrec_no_such.json"}) == 1);
  CHECK(cli::cli_main({"train", "--config", cfg_path, "loss.beta=2"}) == 1);
  CHECK(cli::cli_main({"evaluate", "--config", cfg_path}) == 1);  // no ckpt

  CHECK(cli::cli_main({"train", "--config", cfg_path}) == 0);
  CHECK(fs::exists(out + "/best.bin"));
  CHECK(cli::cli_main({"evaluate", "--config", cfg_path}) == 0);
  CHECK(fs::exists(out + "/eval_report.json"));
  CHECK(cli::cli_main({"diagnose", "--config", cfg_path}) == 0);
  CHECK(fs::exists(out + "/calibration.csv"));
  CHECK(cli::cli_main({"diagnose", "--config", cfg_path, "--user",
                       "nobody"}) == 1);

  // Dotted overrides reach the run: a fresh output_dir via override only.
  std::string out2 = fresh_dir("main2");
  CHECK(cli::cli_main({"prepare-data", "--config", cfg_path,
                       "output_dir=" + out2, "split.seed=6"}) == 0);
  json m = json::parse(slurp(out2 + "/split.json"));
  CHECK(m["validation_seed"] == 6);

  std::string out3 = fresh_dir("main3");
  CHECK(cli::cli_main({"verify-theory", "output_dir=" + out3}) == 0);
  CHECK(fs::exists(out3 + "/theory.csv"));
}

TEST_CASE("same config and seed reproduce evaluation artifacts bitwise") {
  std::string corpus = write_corpus("repro", 40, 15, 27);
  json j = tiny_config(corpus, fresh_dir("repro"));
  j["train"]["max_epochs"] = 2;
  cli::RunConfig cfg = cli::run_config_from_json(j);

  cli::run_train(cfg);
  cli::run_evaluate(cfg);
  std::string report = slurp(cfg.output_dir + "/eval_report.json");
  std::string users = slurp(cfg.output_dir + "/eval_users.csv");
  std::string best = slurp(cfg.output_dir + "/best.bin");

  fs::remove_all(cfg.output_dir);
  cli::run_train(cfg);
  cli::run_evaluate(cfg);
  CHECK(slurp(cfg.output_dir + "/eval_report.json") == report);
  CHECK(slurp(cfg.output_dir + "/eval_users.csv") == users);
  CHECK(slurp(cfg.output_dir + "/best.bin") == best);
}
