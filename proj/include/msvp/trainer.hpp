#pragma once

// The training protocol: seeded shuffles and augmentation streams keyed by
// (seed, purpose, epoch, sample index), Adam with per-epoch cosine annealing,
// validation-based best-checkpoint selection (earliest epoch wins ties), and
// a hard abort on non-finite loss.

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "msvp/checkpoint.hpp"
#include "msvp/datasets.hpp"
#include "msvp/evaluation.hpp"
#include "msvp/optim.hpp"
#include "msvp/tape.hpp"

namespace msvp {

struct TrainConfig {
  int64_t batch_size = 128;
  int64_t epochs = 0;  // 0 = dataset default (10 for 28x28 sets, 150 for cifar)
  double lr0 = 1e-3;
  double weight_decay = 1e-4;
  double eta_min = 0.0;
  uint64_t seed = 42;
  bool decoupled_wd = false;
  double prompt_lr_scale = 1.0;

  void validate() const {
    if (batch_size < 1) fail<ConfigError>("train.batch_size must be >= 1");
    if (epochs < 0) fail<ConfigError>("train.epochs must be >= 1");
    if (lr0 <= 0) fail<ConfigError>("train.lr0 must be positive");
    if (weight_decay < 0) fail<ConfigError>("train.weight_decay must be >= 0");
  }
};

inline int64_t default_epochs(DatasetName name) {
  return name == DatasetName::cifar10 ? 150 : 10;
}

struct PenaltyConfig {
  double l2_weight = 0.0;
  double drift_weight = 0.0;
};

struct EpochLog {
  int64_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  int64_t best_epoch = 0;  // 1-based
  double best_val_acc = 0.0;
  std::string best_checkpoint;  // serialized bytes of the best snapshot
  double wall_seconds = 0.0;
};

// Assembles one augmented, normalized training batch. Per-sample randomness
// is keyed by (seed, epoch, original sample index) so the stream does not
// depend on batch composition or iteration order.
template <typename S>
Tensor<S> make_train_batch(const Dataset& data, const ChannelStats& stats,
                           const AugmentPolicy& policy,
                           const std::vector<int64_t>& samples, uint64_t seed,
                           int64_t epoch, std::vector<int>& labels_out) {
  const int64_t c = data.channels, res = data.resolution;
  const int64_t chw = c * res * res;
  const auto b = static_cast<int64_t>(samples.size());
  Tensor<S> x({b, c, res, res});
  labels_out.resize(static_cast<size_t>(b));
  std::vector<float> buf(static_cast<size_t>(chw));
  for (int64_t i = 0; i < b; ++i) {
    const int64_t src = samples[static_cast<size_t>(i)];
    const uint8_t* img = data.train_images.data() + src * chw;
    for (int64_t j = 0; j < chw; ++j)
      buf[static_cast<size_t>(j)] = static_cast<float>(img[j]);
    rng::Xoshiro256 g(seed, "augment", static_cast<uint64_t>(epoch),
                      static_cast<uint64_t>(src));
    augment(buf.data(), c, res, res, policy, g);
    normalize(buf.data(), c, res * res, stats);
    for (int64_t j = 0; j < chw; ++j)
      x.data()[i * chw + j] = static_cast<S>(buf[static_cast<size_t>(j)]);
    labels_out[static_cast<size_t>(i)] =
        static_cast<int>(data.train_labels[static_cast<size_t>(src)]);
  }
  return x;
}

template <typename S>
TrainResult train(Model<S>& model, const Dataset& data,
                  const SplitIndices& split, const ChannelStats& stats,
                  const AugmentPolicy& policy, const TrainConfig& cfg,
                  const PenaltyConfig& penalties = {},
                  const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  const int64_t epochs = cfg.epochs > 0 ? cfg.epochs : default_epochs(data.name);
  auto* msvp_model = dynamic_cast<MsvpModel<S>*>(&model);
  MSVP_CHECK(msvp_model || (penalties.l2_weight == 0 &&
                            penalties.drift_weight == 0),
             "prompt penalties need an MS-VP-wrapped model");

  AdamConfig<S> acfg;
  acfg.weight_decay = static_cast<S>(cfg.weight_decay);
  acfg.decoupled = cfg.decoupled_wd;
  Adam<S> adam(model.registry(), acfg);
  if (cfg.prompt_lr_scale != 1.0)
    adam.set_lr_scale("msvp.", static_cast<S>(cfg.prompt_lr_scale));

  auto val_set = build_eval_set<S>(data.train_images, data.train_labels,
                                   data.channels, data.resolution, stats,
                                   split.val_idx);

  TrainResult result;
  const auto t_start = std::chrono::steady_clock::now();
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    const double lr = cosine_lr(epoch, epochs, cfg.lr0, cfg.eta_min);
    std::vector<int64_t> order = split.train_idx;
    rng::Xoshiro256 shuffle_rng(cfg.seed, "shuffle",
                                static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    model.set_mode(Mode::train);
    double loss_sum = 0.0;
    int64_t seen = 0, step = 0;
    for (int64_t start = 0; start < static_cast<int64_t>(order.size());
         start += cfg.batch_size) {
      const int64_t b = std::min<int64_t>(cfg.batch_size,
                                          static_cast<int64_t>(order.size()) - start);
      std::vector<int64_t> samples(order.begin() + start,
                                   order.begin() + start + b);
      std::vector<int> labels;
      auto x = make_train_batch<S>(data, stats, policy, samples, cfg.seed,
                                   epoch, labels);
      GradTape<S> tape;
      TapeScope<S> scope(tape);
      auto logits = model.forward(x);
      auto loss = cross_entropy(logits, labels);
      if (msvp_model && penalties.l2_weight > 0)
        loss = add(loss, msvp_model->msvp().l2_penalty(
                              static_cast<S>(penalties.l2_weight)));
      if (msvp_model && penalties.drift_weight > 0)
        loss = add(loss, MsvpModule<S>::drift_penalty(
                              msvp_model->last_input(),
                              msvp_model->last_fused(),
                              static_cast<S>(penalties.drift_weight)));
      const double loss_val = static_cast<double>(loss.item());
      if (!std::isfinite(loss_val))
        fail<NumericError>("training aborted: non-finite loss ", loss_val,
                           " at epoch ", epoch + 1, " step ", step + 1,
                           " (seed ", cfg.seed, ", lr ", lr, ")");
      tape.backward(loss);
      adam.step(static_cast<S>(lr));
      adam.zero_grad();
      loss_sum += loss_val * static_cast<double>(b);
      seen += b;
      ++step;
    }

    const double val_acc = top1_accuracy(model, val_set);
    EpochLog log;
    log.epoch = epoch + 1;
    log.train_loss = loss_sum / static_cast<double>(seen);
    log.val_acc = val_acc;
    log.lr = lr;
    log.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t_epoch).count();
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);

    if (result.best_checkpoint.empty() || val_acc > result.best_val_acc) {
      result.best_val_acc = val_acc;
      result.best_epoch = epoch + 1;
      CheckpointMeta meta;
      meta.epoch = static_cast<uint32_t>(epoch + 1);
      meta.metric = val_acc;
      result.best_checkpoint = serialize_checkpoint(model.registry(), meta);
    }
  }
  result.wall_seconds = std::chrono::duration<double>(
                            std::chrono::steady_clock::now() - t_start).count();
  return result;
}

// ---------------------------------------------------------------------------
// run report (JSON lines: one record per epoch plus a final summary record)

struct RunReport {
  std::vector<EpochLog> epochs;
  double test_acc = 0.0;
  int64_t best_epoch = 0;
  int64_t params_total = 0;
  int64_t params_msvp = 0;
  double delta_pct = 0.0;
  double wall_seconds = 0.0;
  int64_t subset = 0;  // 0 = full dataset
};

inline void write_report_jsonl(const RunReport& report,
                               const std::string& path) {
  std::ofstream out(path);
  MSVP_CHECK(out.good(), "cannot write '", path, "'");
  for (const auto& e : report.epochs) {
    nlohmann::json line = {{"epoch", e.epoch},
                           {"train_loss", e.train_loss},
                           {"val_acc", e.val_acc},
                           {"lr", e.lr},
                           {"seconds", e.seconds}};
    out << line.dump() << "\n";
  }
  nlohmann::json final_line = {{"test_acc", report.test_acc},
                               {"best_epoch", report.best_epoch},
                               {"params_total", report.params_total},
                               {"params_msvp", report.params_msvp}};
  if (report.subset > 0) final_line["subset"] = report.subset;
  out << final_line.dump() << "\n";
  MSVP_CHECK(out.good(), "write failed for '", path, "'");
}

inline RunReport read_report_jsonl(const std::string& path) {
  std::ifstream in(path);
  MSVP_CHECK(in.good(), "cannot read '", path, "'");
  RunReport r;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.contains("epoch")) {
      EpochLog e;
      e.epoch = j["epoch"].get<int64_t>();
      e.train_loss = j["train_loss"].get<double>();
      e.val_acc = j["val_acc"].get<double>();
      e.lr = j["lr"].get<double>();
      e.seconds = j["seconds"].get<double>();
      r.epochs.push_back(e);
    } else {
      r.test_acc = j["test_acc"].get<double>();
      r.best_epoch = j["best_epoch"].get<int64_t>();
      r.params_total = j["params_total"].get<int64_t>();
      r.params_msvp = j["params_msvp"].get<int64_t>();
      if (j.contains("subset")) r.subset = j["subset"].get<int64_t>();
    }
  }
  return r;
}

}  // namespace msvp
