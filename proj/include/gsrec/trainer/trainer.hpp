#pragma once
// Minibatch training loop: Adam or plain SGD over the parameter store,
// negatives resampled every epoch, validation-driven early stopping, and
// checkpoints written to a run directory.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsrec/core/checkpoint.hpp"
#include "gsrec/core/graph.hpp"
#include "gsrec/core/rng.hpp"
#include "gsrec/data/dataset.hpp"
#include "gsrec/eval/evaluate.hpp"
#include "gsrec/losses/losses.hpp"
#include "gsrec/model/sasrec.hpp"
#include "nlohmann/json.hpp"

namespace gsrec::trainer {

struct TrainConfig {
  std::string optimizer = "adam";  // "adam" or "sgd"
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-8;
  int64_t batch_size = 128;
  int64_t max_epochs = 200;
  int64_t early_stop_patience_epochs = 200;
  int64_t eval_every_epochs = 1;
  uint64_t seed = 1;

  void validate() const {
    if (optimizer != "adam" && optimizer != "sgd") {
      throw std::invalid_argument("train: optimizer must be adam or sgd, got " +
                                  optimizer);
    }
    if (!(lr > 0.0))
      throw std::invalid_argument("train: lr must be positive");
    if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 ||
        adam_beta2 >= 1.0) {
      throw std::invalid_argument("train: adam betas must be in [0,1)");
    }
    if (!(adam_eps > 0.0))
      throw std::invalid_argument("train: adam_eps must be positive");
    if (batch_size < 1)
      throw std::invalid_argument("train: batch_size must be >= 1");
    if (max_epochs < 1)
      throw std::invalid_argument("train: max_epochs must be >= 1");
    if (early_stop_patience_epochs < 1)
      throw std::invalid_argument("train: patience must be >= 1");
    if (eval_every_epochs < 1)
      throw std::invalid_argument("train: eval_every_epochs must be >= 1");
  }
};

inline nlohmann::json train_config_json(const TrainConfig& c) {
  return {{"optimizer", c.optimizer},
          {"lr", c.lr},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"early_stop_patience_epochs", c.early_stop_patience_epochs},
          {"eval_every_epochs", c.eval_every_epochs},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.optimizer = j.value("optimizer", c.optimizer);
  c.lr = j.value("lr", c.lr);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop_patience_epochs =
      j.value("early_stop_patience_epochs", c.early_stop_patience_epochs);
  c.eval_every_epochs = j.value("eval_every_epochs", c.eval_every_epochs);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

inline nlohmann::json loss_json(const LossSpec& s) {
  return {{"kind", LossSpec::kind_name(s.kind)},
          {"k", s.k},
          {"t", s.t}};
}

inline LossSpec loss_from_json(const nlohmann::json& j) {
  LossSpec s;
  if (j.contains("kind"))
    s.kind = LossSpec::parse_kind(j.at("kind").get<std::string>());
  s.k = j.value("k", s.k);
  s.t = j.value("t", s.t);
  s.validate();
  return s;
}

// Stop once `patience` consecutive epochs pass without a strict new best.
// Epochs may arrive with gaps (sparse validation); the distance is measured
// in epochs, not in observations.
struct EarlyStopper {
  int64_t patience = 1;
  double best = -std::numeric_limits<double>::infinity();
  int64_t best_epoch = 0;

  // Returns true when training should halt after this epoch.
  bool observe(int64_t epoch, double metric) {
    if (metric > best) {
      best = metric;
      best_epoch = epoch;
      return false;
    }
    return epoch - best_epoch >= patience;
  }
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(ParameterStore& store, const GradientMap& grads) = 0;
};

class Sgd : public Optimizer {
 public:
  explicit Sgd(double lr) : lr_(lr) {}

  void step(ParameterStore& store, const GradientMap& grads) override {
    for (const auto& [name, g] : grads) {
      Tensor& p = store.get(name);
      for (int64_t i = 0; i < p.numel(); ++i) p[i] -= lr_ * g[i];
    }
  }

 private:
  double lr_;
};

class Adam : public Optimizer {
 public:
  Adam(double lr, double beta1, double beta2, double eps)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParameterStore& store, const GradientMap& grads) override {
    ++t_;
    double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      Tensor& p = store.get(name);
      auto& [m, v] = state(name, p.shape());
      for (int64_t i = 0; i < p.numel(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  std::pair<Tensor, Tensor>& state(const std::string& name,
                                   const Shape& shape) {
    auto it = state_.find(name);
    if (it == state_.end()) {
      it = state_.emplace(name, std::make_pair(Tensor(shape), Tensor(shape)))
               .first;
    }
    return it->second;
  }

  double lr_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::pair<Tensor, Tensor>> state_;
};

inline std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& c) {
  if (c.optimizer == "sgd") return std::make_unique<Sgd>(c.lr);
  return std::make_unique<Adam>(c.lr, c.adam_beta1, c.adam_beta2, c.adam_eps);
}

struct EpochRecord {
  int64_t epoch = 0;        // 1-based
  double train_loss = 0.0;  // mean loss per valid target position
  double val_ndcg10 =
      std::numeric_limits<double>::quiet_NaN();  // NaN when not evaluated
  double wall_seconds = 0.0;
  int64_t clamp_events = 0;  // saturated-probability clamps this epoch
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;
  int64_t best_epoch = 0;
  double best_ndcg10 = -std::numeric_limits<double>::infinity();
  std::string best_checkpoint;
};

namespace detail {

inline void write_record_row(std::ofstream& csv, const EpochRecord& er) {
  csv.precision(17);
  csv << er.epoch << ',' << er.train_loss << ',' << er.val_ndcg10 << ','
      << er.wall_seconds << ',' << er.clamp_events << '\n';
  csv.flush();
}

}  // namespace detail

// Trains the model on split.train, validating on the held-out validation
// targets. Writes config.json, train_record.csv, checkpoints/epoch_N.bin for
// every evaluated epoch, and best.bin into run_dir. The final epoch is always
// evaluated even when eval_every_epochs would skip it, so a best checkpoint
// exists. On return the store holds the best epoch's parameters.
inline TrainRecord train(const data::DatasetSplit& split,
                         const model::ModelConfig& mcfg,
                         const LossSpec& spec,
                         const TrainConfig& tcfg,
                         const std::string& run_dir,
                         ParameterStore& store) {
  mcfg.validate();
  spec.validate();
  tcfg.validate();
  const int64_t catalog = split.train.catalog_size;
  if (split.validation_users.empty()) {
    throw std::invalid_argument(
        "train: split has no validation users; early stopping needs a "
        "validation metric");
  }

  namespace fs = std::filesystem;
  fs::create_directories(fs::path(run_dir) / "checkpoints");

  if (store.names().empty())
    model::init_params(store, mcfg, catalog, tcfg.seed);

  {
    nlohmann::json doc = {{"model", model::config_json(mcfg, catalog)},
                          {"loss", loss_json(spec)},
                          {"train", train_config_json(tcfg)}};
    std::ofstream out(fs::path(run_dir) / "config.json");
    if (!out) throw std::runtime_error("train: cannot write config.json");
    out << doc.dump(2) << '\n';
  }

  // Users with a single interaction yield no input/target pair.
  std::vector<const std::vector<int64_t>*> seqs;
  for (const auto& [user, items] : split.train.users) {
    if (items.size() >= 2) seqs.push_back(&items);
  }
  if (seqs.empty()) {
    throw std::runtime_error(
        "train: no user has enough history to form a training pair");
  }

  Rng root = Rng::rooted(tcfg.seed);
  Rng shuffle_rng = root.derive(1);
  Rng sampler_rng = root.derive(2);
  Rng dropout_rng = root.derive(3);

  CompGraph g(&store);
  model::TrainingGraph tg = model::build_training_graph(g, mcfg, spec, catalog);
  std::unique_ptr<Optimizer> opt = make_optimizer(tcfg);
  EarlyStopper stopper{tcfg.early_stop_patience_epochs};

  std::ofstream csv(fs::path(run_dir) / "train_record.csv");
  if (!csv) throw std::runtime_error("train: cannot write train_record.csv");
  csv << "epoch,train_loss,val_ndcg10,wall_seconds,clamp_events\n";

  eval::EvalOptions eopt;
  eopt.rank_validation_targets = true;
  const std::string best_path = (fs::path(run_dir) / "best.bin").string();

  TrainRecord rec;
  std::vector<size_t> order(seqs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int64_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    g.reset_clamp_events();
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    int64_t target_count = 0;
    const size_t bs = static_cast<size_t>(tcfg.batch_size);
    for (size_t start = 0; start < order.size(); start += bs) {
      size_t stop = std::min(order.size(), start + bs);
      std::vector<std::vector<int64_t>> chunk;
      chunk.reserve(stop - start);
      for (size_t i = start; i < stop; ++i) chunk.push_back(*seqs[order[i]]);
      model::SequenceBatch batch = model::make_batch(chunk, mcfg.max_seq_len);
      Bindings binds =
          model::training_bindings(batch, mcfg, spec, catalog, sampler_rng);
      ForwardOptions fo;
      fo.training = true;
      fo.rng = &dropout_rng;
      double loss = 0.0;
      try {
        loss = g.forward(tg.loss, binds, fo)[0];
        if (!std::isfinite(loss))
          throw std::runtime_error("loss is not finite");
        GradientMap grads = g.backward(tg.loss);
        opt->step(store, grads);
      } catch (const std::exception& e) {
        throw std::runtime_error(
            "train: aborted at epoch " + std::to_string(epoch) + ", batch " +
            std::to_string(start / bs + 1) + ": " + e.what() +
            " (clamped probabilities this epoch: " +
            std::to_string(g.clamp_events()) + ")");
      }
      loss_sum += loss * static_cast<double>(batch.valid_count());
      target_count += batch.valid_count();
    }

    EpochRecord er;
    er.epoch = epoch;
    er.train_loss = loss_sum / static_cast<double>(target_count);
    er.clamp_events = g.clamp_events();

    bool evaluate_now =
        (epoch % tcfg.eval_every_epochs == 0) || epoch == tcfg.max_epochs;
    bool stop = false;
    if (evaluate_now) {
      eval::RankReport rep = eval::evaluate(mcfg, store, split, eopt);
      er.val_ndcg10 = rep.ndcg_at_10;
      nlohmann::json meta = {{"epoch", epoch},
                             {"val_ndcg10", er.val_ndcg10},
                             {"model", model::config_json(mcfg, catalog)},
                             {"loss", loss_json(spec)}};
      std::string ck_path =
          (fs::path(run_dir) / "checkpoints" /
           ("epoch_" + std::to_string(epoch) + ".bin"))
              .string();
      save_checkpoint(store, ck_path, meta);
      stop = stopper.observe(epoch, er.val_ndcg10);
      if (stopper.best_epoch == epoch) save_checkpoint(store, best_path, meta);
    }

    er.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    rec.epochs.push_back(er);
    detail::write_record_row(csv, er);
    if (stop) break;
  }

  rec.best_epoch = stopper.best_epoch;
  rec.best_ndcg10 = stopper.best;
  rec.best_checkpoint = best_path;
  load_checkpoint(store, best_path);
  return rec;
}

}  // namespace gsrec::trainer
