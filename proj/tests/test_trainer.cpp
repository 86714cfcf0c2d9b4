#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "gsrec/sampling/negatives.hpp"
#include "gsrec/theory/convergence.hpp"
#include "gsrec/trainer/trainer.hpp"

using namespace gsrec;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinRel;

namespace {

std::string fresh_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("gsrec_run_" + tag);
  std::filesystem::remove_all(p);
  return p.string();
}

struct Fixture {
  data::DatasetSplit split;
  model::ModelConfig cfg;
  LossSpec spec;
  trainer::TrainConfig tc;
  int64_t catalog = 15;

  Fixture() {
    data::InteractionLog log;
    log.catalog_size = catalog;
    log.item_labels.push_back("");
    for (int64_t i = 1; i <= catalog; ++i)
      log.item_labels.push_back("it" + std::to_string(i));
    Rng rng = Rng::rooted(12);
    for (int64_t u = 0; u < 30; ++u) {
      auto& seq = log.users["u" + std::to_string(u)];
      int64_t len = 3 + int64_t(rng.uniform_index(8));
      for (int64_t i = 0; i < len; ++i)
        seq.push_back(1 + int64_t(rng.uniform_index(uint64_t(catalog))));
    }
    log.validate();
    split = data::leave_one_out_split(log, 8, 5);

    cfg.max_seq_len = 6;
    cfg.embed_dim = 8;
    cfg.n_blocks = 1;
    cfg.n_heads = 2;
    cfg.dropout_rate = 0.1;

    spec.kind = LossSpec::Kind::GBCE;
    spec.k = 2;
    spec.t = 0.75;

    tc.lr = 3e-3;
    tc.batch_size = 8;
    tc.max_epochs = 1;
    tc.seed = 3;
  }
};

bool same_or_both_nan(double a, double b) {
  return a == b || (std::isnan(a) && std::isnan(b));
}

size_t count_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("early stopping waits out the patience window") {
  trainer::EarlyStopper s{2};
  REQUIRE_FALSE(s.observe(1, 0.1));
  REQUIRE_FALSE(s.observe(2, 0.2));
  REQUIRE_FALSE(s.observe(3, 0.15));
  REQUIRE(s.observe(4, 0.18));  // two epochs past the epoch-2 best
  REQUIRE(s.best_epoch == 2);
  REQUIRE(s.best == 0.2);

  trainer::EarlyStopper one{1};
  REQUIRE_FALSE(one.observe(1, 0.5));
  REQUIRE(one.observe(2, 0.4));

  trainer::EarlyStopper never{3};
  for (int e = 1; e <= 50; ++e)
    REQUIRE_FALSE(never.observe(e, 0.01 * e));
  REQUIRE(never.best_epoch == 50);

  // a tie is not an improvement
  trainer::EarlyStopper tie{2};
  REQUIRE_FALSE(tie.observe(1, 0.3));
  REQUIRE_FALSE(tie.observe(2, 0.3));
  REQUIRE(tie.observe(3, 0.3));
  REQUIRE(tie.best_epoch == 1);

  // sparse validation: the distance is counted in epochs, not observations
  trainer::EarlyStopper sparse{3};
  REQUIRE_FALSE(sparse.observe(2, 0.4));
  REQUIRE(sparse.observe(6, 0.35));
}

TEST_CASE("sgd applies the exact gradient step") {
  ParameterStore store;
  Tensor& x = store.create("x", {2});
  x[0] = 1.0;
  x[1] = -2.0;
  GradientMap grads;
  grads.emplace("x", Tensor({2}, {0.25, -0.5}));
  trainer::Sgd opt(0.5);
  opt.step(store, grads);
  REQUIRE(x[0] == 0.875);
  REQUIRE(x[1] == -1.75);
}

TEST_CASE("adam follows the frozen float64 trajectory") {
  // five steps on f(x) = (x - 3)^2 from x = 0, lr 0.1, betas (0.9, 0.98),
  // eps 1e-8; reference values computed independently in float64
  ParameterStore store;
  Tensor& x = store.create("x", {1});
  trainer::Adam opt(0.1, 0.9, 0.98, 1e-8);
  const double want[5] = {0.09999999983333335, 0.19991354792042743,
                          0.29967869614019843, 0.39923020630918915,
                          0.4984995142769897};
  for (int step = 0; step < 5; ++step) {
    double d = x[0] - 3.0;
    GradientMap grads;
    grads.emplace("x", Tensor({1}, {d + d}));
    opt.step(store, grads);
    REQUIRE_THAT(x[0], WithinRel(want[step], 1e-12));
  }
  REQUIRE(opt.steps_taken() == 5);
}

TEST_CASE("adam drives a quadratic near its minimum") {
  ParameterStore store;
  Tensor& x = store.create("x", {1});
  trainer::Adam opt(0.05, 0.9, 0.98, 1e-8);
  for (int step = 0; step < 2000; ++step) {
    GradientMap grads;
    grads.emplace("x", Tensor({1}, {2.0 * (x[0] - 3.0)}));
    opt.step(store, grads);
  }
  REQUIRE(std::abs(x[0] - 3.0) < 0.1);
}

TEST_CASE("optimizer state is kept per parameter") {
  ParameterStore store;
  store.create("a", {1});
  store.create("b", {1});
  trainer::Adam opt(0.1, 0.9, 0.98, 1e-8);
  GradientMap ga;
  ga.emplace("a", Tensor({1}, {1.0}));
  opt.step(store, ga);
  GradientMap gb;
  gb.emplace("b", Tensor({1}, {1.0}));
  opt.step(store, gb);
  // b took its first step with stale bias correction but fresh moments;
  // both must have moved in the negative direction and "a" stayed put
  REQUIRE(store.get("a")[0] < 0.0);
  REQUIRE(store.get("b")[0] < 0.0);
  double a_after_first = store.get("a")[0];
  GradientMap gb2;
  gb2.emplace("b", Tensor({1}, {1.0}));
  opt.step(store, gb2);
  REQUIRE(store.get("a")[0] == a_after_first);
}

TEST_CASE("train config validation rejects bad settings") {
  trainer::TrainConfig ok;
  REQUIRE_NOTHROW(ok.validate());
  auto broken = [](auto mutate) {
    trainer::TrainConfig c;
    mutate(c);
    return c;
  };
  REQUIRE_THROWS_AS(
      broken([](auto& c) { c.optimizer = "adagrad"; }).validate(),
      std::invalid_argument);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.lr = 0.0; }).validate(),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.adam_beta2 = 1.0; }).validate(),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.batch_size = 0; }).validate(),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.max_epochs = 0; }).validate(),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(
      broken([](auto& c) { c.early_stop_patience_epochs = 0; }).validate(),
      std::invalid_argument);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.eval_every_epochs = 0; }).validate(),
                    std::invalid_argument);
}

TEST_CASE("config json for train and loss round-trips") {
  trainer::TrainConfig c;
  c.optimizer = "sgd";
  c.lr = 0.125;
  c.batch_size = 32;
  c.max_epochs = 7;
  c.early_stop_patience_epochs = 3;
  c.eval_every_epochs = 2;
  c.seed = 99;
  trainer::TrainConfig back = trainer::train_config_from_json(
      trainer::train_config_json(c));
  REQUIRE(back.optimizer == c.optimizer);
  REQUIRE(back.lr == c.lr);
  REQUIRE(back.batch_size == c.batch_size);
  REQUIRE(back.max_epochs == c.max_epochs);
  REQUIRE(back.early_stop_patience_epochs == c.early_stop_patience_epochs);
  REQUIRE(back.eval_every_epochs == c.eval_every_epochs);
  REQUIRE(back.seed == c.seed);

  LossSpec s;
  s.kind = LossSpec::Kind::SSM;
  s.k = 17;
  LossSpec sback = trainer::loss_from_json(trainer::loss_json(s));
  REQUIRE(sback.kind == s.kind);
  REQUIRE(sback.k == 17);
  REQUIRE(sback.t == s.t);
  REQUIRE_THROWS_AS(trainer::loss_from_json({{"kind", "mse"}}),
                    std::invalid_argument);
}

TEST_CASE("a one-epoch run writes the full run directory") {
  Fixture f;
  std::string dir = fresh_dir("one_epoch");
  ParameterStore store;
  trainer::TrainRecord rec =
      trainer::train(f.split, f.cfg, f.spec, f.tc, dir, store);

  REQUIRE(rec.epochs.size() == 1);
  REQUIRE(rec.epochs[0].epoch == 1);
  REQUIRE(std::isfinite(rec.epochs[0].train_loss));
  REQUIRE(rec.epochs[0].train_loss > 0.0);
  REQUIRE(std::isfinite(rec.epochs[0].val_ndcg10));
  REQUIRE(rec.epochs[0].wall_seconds >= 0.0);
  REQUIRE(rec.best_epoch == 1);
  REQUIRE(rec.best_ndcg10 == rec.epochs[0].val_ndcg10);

  namespace fs = std::filesystem;
  REQUIRE(fs::exists(fs::path(dir) / "config.json"));
  REQUIRE(fs::exists(fs::path(dir) / "checkpoints" / "epoch_1.bin"));
  REQUIRE(fs::exists(fs::path(dir) / "best.bin"));
  REQUIRE(rec.best_checkpoint == (fs::path(dir) / "best.bin").string());

  // header plus one row
  REQUIRE(count_lines((fs::path(dir) / "train_record.csv").string()) == 2);
  std::ifstream csv(fs::path(dir) / "train_record.csv");
  std::string header;
  std::getline(csv, header);
  REQUIRE(header == "epoch,train_loss,val_ndcg10,wall_seconds,clamp_events");

  // the config file reproduces every configuration block
  std::ifstream cj(fs::path(dir) / "config.json");
  nlohmann::json doc = nlohmann::json::parse(cj);
  int64_t cat = 0;
  model::ModelConfig mback = model::config_from_json(doc.at("model"), &cat);
  REQUIRE(cat == f.catalog);
  REQUIRE(mback.max_seq_len == f.cfg.max_seq_len);
  REQUIRE(mback.embed_dim == f.cfg.embed_dim);
  REQUIRE(mback.dropout_rate == f.cfg.dropout_rate);
  LossSpec sback = trainer::loss_from_json(doc.at("loss"));
  REQUIRE(sback.kind == f.spec.kind);
  REQUIRE(sback.k == f.spec.k);
  REQUIRE(sback.t == f.spec.t);
  trainer::TrainConfig tback =
      trainer::train_config_from_json(doc.at("train"));
  REQUIRE(tback.seed == f.tc.seed);
  REQUIRE(tback.batch_size == f.tc.batch_size);
}

TEST_CASE("the same seed reproduces the training run bitwise") {
  Fixture f;
  f.tc.max_epochs = 3;
  ParameterStore s1, s2;
  trainer::TrainRecord r1 =
      trainer::train(f.split, f.cfg, f.spec, f.tc, fresh_dir("det_a"), s1);
  trainer::TrainRecord r2 =
      trainer::train(f.split, f.cfg, f.spec, f.tc, fresh_dir("det_b"), s2);

  REQUIRE(r1.epochs.size() == r2.epochs.size());
  for (size_t i = 0; i < r1.epochs.size(); ++i) {
    REQUIRE(r1.epochs[i].epoch == r2.epochs[i].epoch);
    REQUIRE(r1.epochs[i].epoch == int64_t(i) + 1);
    REQUIRE(r1.epochs[i].train_loss == r2.epochs[i].train_loss);
    REQUIRE(same_or_both_nan(r1.epochs[i].val_ndcg10, r2.epochs[i].val_ndcg10));
    REQUIRE(r1.epochs[i].clamp_events == r2.epochs[i].clamp_events);
  }
  REQUIRE(r1.best_epoch == r2.best_epoch);
  REQUIRE(r1.best_ndcg10 == r2.best_ndcg10);
  REQUIRE(s1.names() == s2.names());
  for (const std::string& n : s1.names())
    REQUIRE(s1.get(n).vec() == s2.get(n).vec());

  // a different seed gives a different run
  f.tc.seed = 4;
  ParameterStore s3;
  trainer::TrainRecord r3 =
      trainer::train(f.split, f.cfg, f.spec, f.tc, fresh_dir("det_c"), s3);
  REQUIRE(r3.epochs[0].train_loss != r1.epochs[0].train_loss);
}

TEST_CASE("the returned checkpoint beats every stored checkpoint") {
  Fixture f;
  f.tc.max_epochs = 5;
  f.tc.lr = 1e-2;
  std::string dir = fresh_dir("best_of");
  ParameterStore store;
  trainer::TrainRecord rec =
      trainer::train(f.split, f.cfg, f.spec, f.tc, dir, store);

  namespace fs = std::filesystem;
  size_t found = 0;
  for (const auto& entry :
       fs::directory_iterator(fs::path(dir) / "checkpoints")) {
    ParameterStore scratch;
    nlohmann::json meta = load_checkpoint(scratch, entry.path().string());
    REQUIRE(rec.best_ndcg10 >= meta.at("val_ndcg10").get<double>());
    ++found;
  }
  REQUIRE(found == 5);

  // best.bin holds the parameters the store was left with
  ParameterStore best;
  nlohmann::json bmeta = load_checkpoint(best, rec.best_checkpoint);
  REQUIRE(bmeta.at("epoch").get<int64_t>() == rec.best_epoch);
  REQUIRE(bmeta.at("val_ndcg10").get<double>() == rec.best_ndcg10);
  REQUIRE(best.names() == store.names());
  for (const std::string& n : best.names())
    REQUIRE(best.get(n).vec() == store.get(n).vec());

  // the record's own row at best_epoch agrees
  REQUIRE(rec.epochs[size_t(rec.best_epoch) - 1].val_ndcg10 ==
          rec.best_ndcg10);
}

TEST_CASE("sparse validation still evaluates the final epoch") {
  Fixture f;
  f.tc.max_epochs = 5;
  f.tc.eval_every_epochs = 2;
  std::string dir = fresh_dir("sparse_eval");
  ParameterStore store;
  trainer::TrainRecord rec =
      trainer::train(f.split, f.cfg, f.spec, f.tc, dir, store);

  REQUIRE(rec.epochs.size() == 5);
  REQUIRE(std::isnan(rec.epochs[0].val_ndcg10));
  REQUIRE(std::isfinite(rec.epochs[1].val_ndcg10));
  REQUIRE(std::isnan(rec.epochs[2].val_ndcg10));
  REQUIRE(std::isfinite(rec.epochs[3].val_ndcg10));
  REQUIRE(std::isfinite(rec.epochs[4].val_ndcg10));  // forced final eval

  namespace fs = std::filesystem;
  auto ck = [&](int64_t e) {
    return fs::exists(fs::path(dir) / "checkpoints" /
                      ("epoch_" + std::to_string(e) + ".bin"));
  };
  REQUIRE_FALSE(ck(1));
  REQUIRE(ck(2));
  REQUIRE_FALSE(ck(3));
  REQUIRE(ck(4));
  REQUIRE(ck(5));
}

TEST_CASE("training halts when patience runs out") {
  Fixture f;
  f.tc.max_epochs = 12;
  f.tc.early_stop_patience_epochs = 2;
  f.tc.lr = 1e-2;
  ParameterStore store;
  trainer::TrainRecord rec =
      trainer::train(f.split, f.cfg, f.spec, f.tc, fresh_dir("halt"), store);

  // replay the halting rule over the recorded metric sequence
  int64_t best_epoch = 0;
  double best = -std::numeric_limits<double>::infinity();
  int64_t stop_at = f.tc.max_epochs;
  for (const auto& er : rec.epochs) {
    if (er.val_ndcg10 > best) {
      best = er.val_ndcg10;
      best_epoch = er.epoch;
    }
    if (er.epoch - best_epoch >= f.tc.early_stop_patience_epochs) {
      stop_at = er.epoch;
      break;
    }
  }
  REQUIRE(int64_t(rec.epochs.size()) == stop_at);
  REQUIRE(rec.epochs.back().epoch == stop_at);
  REQUIRE(rec.best_epoch == best_epoch);
  REQUIRE(rec.best_ndcg10 == best);
}

TEST_CASE("diverging training aborts with a diagnostic") {
  Fixture f;
  f.tc.optimizer = "sgd";
  f.tc.lr = 1e30;
  f.tc.max_epochs = 5;
  ParameterStore store;
  REQUIRE_THROWS_WITH(
      trainer::train(f.split, f.cfg, f.spec, f.tc, fresh_dir("boom"), store),
      ContainsSubstring("aborted") && ContainsSubstring("clamped"));
}

TEST_CASE("training requires a validation set and usable histories") {
  Fixture f;
  data::DatasetSplit no_val = f.split;
  no_val.validation_users.clear();
  ParameterStore store;
  REQUIRE_THROWS_AS(trainer::train(no_val, f.cfg, f.spec, f.tc,
                                   fresh_dir("no_val"), store),
                    std::invalid_argument);

  data::DatasetSplit thin = f.split;
  for (auto& [user, items] : thin.train.users) items.resize(1);
  ParameterStore store2;
  REQUIRE_THROWS_AS(trainer::train(thin, f.cfg, f.spec, f.tc,
                                   fresh_dir("thin"), store2),
                    std::runtime_error);
}

TEST_CASE("trained sequence model reaches the tabular fixed points") {
  // Every user sees the same one-item context and then one target item drawn
  // from a fixed composition, so the transformer degenerates to a tabular
  // scorer: one shared hidden state, one free score per item. Its converged
  // per-item sigmoids must land on the closed-form fixed points.
  const int64_t catalog = 6;  // items 1..5 are targets, 6 is the context
  const int64_t counts[5] = {700, 500, 400, 300, 100};
  const int64_t total = 2000;

  data::InteractionLog log;
  log.catalog_size = catalog;
  log.item_labels = {"", "i1", "i2", "i3", "i4", "i5", "ctx"};
  int64_t u = 0;
  for (int64_t item = 1; item <= 5; ++item)
    for (int64_t c = 0; c < counts[item - 1]; ++c, ++u)
      log.users["u" + std::to_string(u)] = {6, item};
  log.validate();
  REQUIRE(int64_t(log.users.size()) == total);

  data::DatasetSplit split;
  split.train = log;
  for (int64_t i = 0; i < 5; ++i) {
    std::string name = "u" + std::to_string(i * 397);
    split.validation_users.push_back(name);
    split.validation_targets[name] = split.train.users.at(name)[1];
  }

  model::ModelConfig cfg;
  cfg.max_seq_len = 1;
  cfg.embed_dim = 8;
  cfg.n_blocks = 1;
  cfg.n_heads = 2;
  cfg.dropout_rate = 0.0;
  cfg.tie_output_embeddings = false;  // scores decouple from the input side

  LossSpec spec;
  spec.kind = LossSpec::Kind::GBCE;
  spec.k = 2;
  spec.t = 0.5;

  trainer::TrainConfig tc;
  tc.lr = 1e-2;
  tc.batch_size = 128;
  tc.max_epochs = 300;
  tc.early_stop_patience_epochs = 1000000;
  tc.eval_every_epochs = 300;
  tc.seed = 11;

  ParameterStore store;
  trainer::TrainRecord rec = trainer::train(split, cfg, spec, tc,
                                            fresh_dir("tabular"), store);
  REQUIRE(rec.epochs.size() == 300);
  REQUIRE(rec.epochs.back().train_loss < rec.epochs.front().train_loss);

  // read the scores the trained model assigns after the context item
  CompGraph g(&store);
  NodeId hidden = model::forward_hidden(g, cfg);
  NodeId sc = g.catalog_scores(hidden, model::output_table(g, cfg));
  model::InferenceBatch ib = model::make_inference_batch({{6}}, 1);
  Bindings binds;
  binds["input_ids"] = ib.inputs;
  binds["key_valid"] = ib.mask;
  Tensor m3 = ib.mask;
  m3.reshape({1, 1, 1});
  binds["pos_mask"] = std::move(m3);
  const Tensor& s = g.forward(sc, binds);
  REQUIRE(s.shape() == Shape{1, 1, catalog});

  double alpha = sampling::sampling_rate(spec.k, catalog);
  double beta = beta_from_t(spec.t, alpha);
  for (int64_t item = 1; item <= 5; ++item) {
    double phat = double(counts[item - 1]) / double(total);
    double target = theory::converged_sigmoid(phat, alpha, beta);
    double sig = scalar::sigmoid(s[item - 1]);
    INFO("item " << item << ": sigma " << sig << " target " << target);
    REQUIRE(std::abs(sig - target) < 0.02);
  }
  // the context item never appears as a positive, so its sigmoid sinks to 0
  REQUIRE(scalar::sigmoid(s[5]) < 0.02);
}
