#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "msvp/backbones.hpp"
#include "msvp/checkpoint.hpp"
#include "msvp/optim.hpp"
#include "msvp/trainer.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using msvp::Adam;
using msvp::AdamConfig;
using msvp::BackboneSpec;
using msvp::Family;
using msvp::Tensor;

namespace {

BackboneSpec small_spec(Family f, int64_t c = 1, int64_t res = 28) {
  BackboneSpec s;
  s.family = f;
  s.in_channels = c;
  s.resolution = res;
  return s;
}

template <typename S>
void backward_scalar_loss(msvp::ParamRegistry<S>& reg,
                          const std::function<Tensor<S>()>& loss_fn) {
  msvp::GradTape<S> tape;
  msvp::TapeScope<S> scope(tape);
  tape.backward(loss_fn());
}

}  // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  REQUIRE(msvp::cosine_lr(0, 10, 1e-3, 0.0) == 1e-3);
  REQUIRE(msvp::cosine_lr(10, 10, 1e-3, 0.0) == Catch::Approx(0.0).margin(1e-19));
  REQUIRE(msvp::cosine_lr(5, 10, 1e-3, 0.0) == Catch::Approx(5e-4));
  REQUIRE(msvp::cosine_lr(11, 10, 1e-3, 2e-5) == 2e-5);  // clamped past T
  REQUIRE(msvp::cosine_lr(0, 10, 1e-3, 1e-5) == 1e-3);
  REQUIRE(msvp::cosine_lr(10, 10, 1e-3, 1e-5) == Catch::Approx(1e-5));
}

TEST_CASE("adam: zero gradient with no decay leaves parameters unchanged") {
  msvp::ParamRegistry<double> reg;
  auto& p = reg.add_param("theta", Tensor<double>::full({4}, 1.5));
  Adam<double> adam(reg, {});
  p.ensure_grad();
  adam.step(0.1);
  for (int64_t i = 0; i < 4; ++i) REQUIRE(p.data()[i] == 1.5);
}

TEST_CASE("adam first step moves by -lr * g/(|g|+eps)") {
  msvp::ParamRegistry<double> reg;
  auto& p = reg.add_param("theta", Tensor<double>::full({1}, 2.0));
  Adam<double> adam(reg, {});
  const double g = 0.37;
  p.ensure_grad();
  p.grad()[0] = g;
  adam.step(0.01);
  const double expected = 2.0 - 0.01 * g / (std::abs(g) + 1e-8);
  REQUIRE(p.data()[0] == Catch::Approx(expected).margin(1e-15));
}

TEST_CASE("adam on f(theta)=theta^2 matches the scalar oracle exactly") {
  msvp::ParamRegistry<double> reg;
  auto& theta = reg.add_param("theta", Tensor<double>::full({1}, 1.0));
  Adam<double> adam(reg, {});
  std::vector<double> mine;
  for (int step = 0; step < 10; ++step) {
    backward_scalar_loss<double>(reg, [&] { return msvp::mul(theta, theta); });
    adam.step(0.1);
    adam.zero_grad();
    mine.push_back(theta.data()[0]);
  }
  auto ref = oracle::adam_trajectory(1.0, 0.1, 0.9, 0.999, 1e-8, 10,
                                     [](double t) { return 2.0 * t; });
  for (int i = 0; i < 10; ++i)
    REQUIRE(mine[static_cast<size_t>(i)] == ref[static_cast<size_t>(i)]);
}

TEST_CASE("adam with no decay monotonically decreases a convex quadratic") {
  msvp::ParamRegistry<double> reg;
  auto& theta = reg.add_param("theta", Tensor<double>::full({1}, 3.0));
  Adam<double> adam(reg, {});
  double prev = 9.0;
  for (int step = 0; step < 50; ++step) {
    backward_scalar_loss<double>(reg, [&] { return msvp::mul(theta, theta); });
    adam.step(0.05);
    adam.zero_grad();
    const double loss = theta.data()[0] * theta.data()[0];
    if (step >= 2) REQUIRE(loss < prev);  // after the bias-correction warm-up
    prev = loss;
  }
}

TEST_CASE("adam hard-errors on a missing gradient") {
  msvp::ParamRegistry<double> reg;
  reg.add_param("used", Tensor<double>::full({2}, 1.0));
  reg.add_param("orphan", Tensor<double>::full({2}, 1.0));
  Adam<double> adam(reg, {});
  reg.params()[0].second.ensure_grad();
  REQUIRE_THROWS_WITH(adam.step(0.1),
                      Catch::Matchers::ContainsSubstring("orphan"));
}

TEST_CASE("decoupled weight decay differs from coupled") {
  auto run = [&](bool decoupled) {
    msvp::ParamRegistry<double> reg;
    auto& theta = reg.add_param("theta", Tensor<double>::full({1}, 1.0));
    AdamConfig<double> cfg;
    cfg.weight_decay = 0.1;
    cfg.decoupled = decoupled;
    Adam<double> adam(reg, cfg);
    theta.ensure_grad();
    theta.grad()[0] = 0.5;
    adam.step(0.01);
    return theta.data()[0];
  };
  REQUIRE(run(false) != run(true));
}

TEST_CASE("checkpoint save/load round-trips eval logits bit-exactly") {
  auto data = testutil::synthetic_dataset(96, 16);
  auto split = msvp::split(data.n_train, 0.9, 42);
  auto stats = msvp::compute_stats(data, split);

  auto model = msvp::build_backbone<float>(small_spec(Family::cnn4), 42);
  // one training step so running stats and weights move off init
  msvp::TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 1;
  (void)msvp::train(*model, data, split, stats, {0, 0.0, 0.0}, cfg);

  auto set = msvp::build_eval_set<float>(data.test_images, data.test_labels,
                                         1, 28, stats);
  model->set_mode(msvp::Mode::eval);
  Tensor<float> x({set.count, 1, 28, 28});
  std::copy(set.images.begin(), set.images.end(), x.data());
  auto before = model->forward(x);

  testutil::TempDir tmp("ckpt");
  msvp::CheckpointMeta meta;
  meta.config_hash = 0xabcd;
  meta.epoch = 1;
  meta.metric = 0.5;
  msvp::save_checkpoint(model->registry(), meta, tmp.file("m.ckpt"));

  auto fresh = msvp::build_backbone<float>(small_spec(Family::cnn4), 1234);
  auto loaded = msvp::load_checkpoint_into(fresh->registry(), tmp.file("m.ckpt"));
  REQUIRE(loaded.config_hash == 0xabcd);
  REQUIRE(loaded.epoch == 1);
  fresh->set_mode(msvp::Mode::eval);
  auto after = fresh->forward(x);
  for (int64_t i = 0; i < before.numel(); ++i)
    REQUIRE(before.data()[i] == after.data()[i]);
}

TEST_CASE("loading a checkpoint into the wrong architecture names the "
          "offending record") {
  testutil::TempDir tmp("ckpt2");
  auto cnn = msvp::build_backbone<float>(small_spec(Family::cnn4), 42);
  msvp::save_checkpoint(cnn->registry(), {}, tmp.file("cnn.ckpt"));
  auto resnet =
      msvp::build_backbone<float>(small_spec(Family::resnet18_small), 42);
  try {
    msvp::load_checkpoint_into(resnet->registry(), tmp.file("cnn.ckpt"));
    FAIL("expected a DataError");
  } catch (const msvp::DataError& e) {
    const std::string msg = e.what();
    REQUIRE(msg.find("block1.conv.weight") != std::string::npos);
    REQUIRE(msg.find("stem.conv.weight") != std::string::npos);
  }
}

TEST_CASE("checkpoint rejects bad magic and truncation distinctly") {
  testutil::TempDir tmp("ckpt3");
  {
    std::ofstream out(tmp.file("junk.ckpt"), std::ios::binary);
    out << "NOTACKPT damaged";
  }
  auto model = msvp::build_backbone<float>(small_spec(Family::cnn4), 42);
  REQUIRE_THROWS_WITH(
      msvp::load_checkpoint_into(model->registry(), tmp.file("junk.ckpt")),
      Catch::Matchers::ContainsSubstring("magic"));

  msvp::save_checkpoint(model->registry(), {}, tmp.file("full.ckpt"));
  // drop the tail
  {
    std::ifstream in(tmp.file("full.ckpt"), std::ios::binary | std::ios::ate);
    std::string buf(static_cast<size_t>(in.tellg()) / 2, '\0');
    in.seekg(0);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    std::ofstream out(tmp.file("half.ckpt"), std::ios::binary);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  }
  REQUIRE_THROWS_WITH(
      msvp::load_checkpoint_into(model->registry(), tmp.file("half.ckpt")),
      Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("prompt-only checkpoint payload size is exactly header + 243*4") {
  auto module = msvp::MsvpModule<float>::init(3, 32, {}, {},
                                              msvp::FusionKind::addition);
  const std::string bytes = msvp::serialize_checkpoint(module.registry(), {});
  // fixed header: magic 8 + version 4 + hash 8 + epoch 4 + metric 8 + count 4
  size_t expected = 36;
  const struct {
    const char* name;
    size_t ndim;
    size_t numel;
  } recs[] = {{"prompt_g", 3, 3}, {"prompt_m", 3, 48}, {"prompt_l", 3, 192}};
  size_t payload = 0;
  for (const auto& r : recs) {
    expected += 4 + std::strlen(r.name) + 1 + 4 + 4 * r.ndim;
    payload += 4 * r.numel;
  }
  expected += payload + 1;  // trailing optimizer flag
  REQUIRE(payload == 243 * 4);
  REQUIRE(bytes.size() == expected);
}

TEST_CASE("training on the synthetic set decreases loss deterministically") {
  auto data = testutil::synthetic_dataset(200, 40);
  auto split = msvp::split(data.n_train, 0.9, 42);
  auto stats = msvp::compute_stats(data, split);
  msvp::TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 3;

  auto run = [&] {
    auto model = msvp::build_backbone<float>(small_spec(Family::cnn4), 42);
    return msvp::train(*model, data, split, stats, {4, 10.0, 0.0}, cfg);
  };
  auto r1 = run();
  REQUIRE(r1.epochs.size() == 3);
  REQUIRE(r1.epochs.back().train_loss < r1.epochs.front().train_loss);

  // the learning-rate log matches the closed form at every epoch
  for (const auto& e : r1.epochs)
    REQUIRE(e.lr == msvp::cosine_lr(e.epoch - 1, 3, cfg.lr0, cfg.eta_min));

  // retained checkpoint has the max validation accuracy, earliest epoch
  double best = -1;
  int64_t best_epoch = 0;
  for (const auto& e : r1.epochs)
    if (e.val_acc > best) {
      best = e.val_acc;
      best_epoch = e.epoch;
    }
  REQUIRE(r1.best_val_acc == best);
  REQUIRE(r1.best_epoch == best_epoch);

  // bit-identical reruns: metrics and checkpoint bytes
  auto r2 = run();
  for (size_t i = 0; i < r1.epochs.size(); ++i) {
    REQUIRE(r1.epochs[i].train_loss == r2.epochs[i].train_loss);
    REQUIRE(r1.epochs[i].val_acc == r2.epochs[i].val_acc);
  }
  REQUIRE(r1.best_checkpoint == r2.best_checkpoint);
}

TEST_CASE("fusion transparency: frozen zero prompts reproduce the baseline "
          "trajectory bit-exactly") {
  auto data = testutil::synthetic_dataset(128, 16);
  auto split = msvp::split(data.n_train, 0.9, 42);
  auto stats = msvp::compute_stats(data, split);
  msvp::TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 2;

  auto baseline = msvp::build_backbone<float>(small_spec(Family::cnn4), 42);
  auto rb = msvp::train(*baseline, data, split, stats, {4, 10.0, 0.0}, cfg);

  msvp::TrainConfig frozen = cfg;
  frozen.prompt_lr_scale = 0.0;
  auto wrapped = msvp::wrap_with_msvp<float>(
      msvp::build_backbone<float>(small_spec(Family::cnn4), 42),
      msvp::MsvpModule<float>::init(1, 28, {}, {}, msvp::FusionKind::addition));
  auto rw = msvp::train(*wrapped, data, split, stats, {4, 10.0, 0.0}, frozen);

  for (size_t i = 0; i < rb.epochs.size(); ++i) {
    REQUIRE(rb.epochs[i].train_loss == rw.epochs[i].train_loss);
    REQUIRE(rb.epochs[i].val_acc == rw.epochs[i].val_acc);
  }
  // backbone weights end up identical
  for (size_t p = 0; p < baseline->registry().params().size(); ++p) {
    const auto& [name, bt] = baseline->registry().params()[p];
    const auto& [wname, wt] = wrapped->registry().params()[p];
    REQUIRE(name == wname);
    for (int64_t i = 0; i < bt.numel(); ++i)
      REQUIRE(bt.data()[i] == wt.data()[i]);
  }
}

TEST_CASE("non-finite loss aborts with epoch and step diagnostics") {
  auto data = testutil::synthetic_dataset(96, 16);
  auto split = msvp::split(data.n_train, 0.9, 42);
  auto stats = msvp::compute_stats(data, split);
  msvp::TrainConfig cfg;
  cfg.batch_size = 32;
  cfg.epochs = 2;
  cfg.lr0 = 1e22;  // diverges to inf/nan within a few steps
  auto model = msvp::build_backbone<float>(small_spec(Family::cnn4), 42);
  REQUIRE_THROWS_AS(msvp::train(*model, data, split, stats, {0, 0.0, 0.0}, cfg),
                    msvp::NumericError);
}

TEST_CASE("report JSONL round trip") {
  msvp::RunReport r;
  r.epochs.push_back({1, 2.0, 0.5, 1e-3, 3.2});
  r.epochs.push_back({2, 1.0, 0.75, 5e-4, 3.1});
  r.test_acc = 0.77;
  r.best_epoch = 2;
  r.params_total = 392000;
  r.params_msvp = 81;
  r.subset = 500;
  testutil::TempDir tmp("report");
  msvp::write_report_jsonl(r, tmp.file("report.jsonl"));
  auto back = msvp::read_report_jsonl(tmp.file("report.jsonl"));
  REQUIRE(back.epochs.size() == 2);
  REQUIRE(back.epochs[1].val_acc == 0.75);
  REQUIRE(back.test_acc == 0.77);
  REQUIRE(back.best_epoch == 2);
  REQUIRE(back.params_total == 392000);
  REQUIRE(back.params_msvp == 81);
  REQUIRE(back.subset == 500);
}
