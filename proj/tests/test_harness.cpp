#include <gtest/gtest.h>

#include <fstream>
#include <numeric>

#include "ebm/harness.hpp"
#include "test_util.hpp"

using namespace ebm;
using ebm::testing::TempDir;

namespace {

TrainConfig tiny_config(const std::string& env = "eyemove") {
  TrainConfig c;
  c.env = env;
  c.widths = {12, 12};
  c.batch_size = 4;
  c.epochs = 2;
  c.T = 1.0;
  c.seed = 3;
  return c;
}

Dataset tiny_images(std::size_t n = 3) {
  return Dataset::eyemove(synth_smooth_images(n, 8, 8, 1, 1), PatchGrid{});
}

Dataset tiny_grid() {
  return Dataset::gridworld(synth_tiles(3, 3, 3, 3, 2), 3, 3, DataShape{3, 3, 1});
}

Dataset tiny_bars() {
  const RotatingBars bars = synth_rotating_bars(3, 6, 6, 4);
  return Dataset::sequence(bars.episodes, DataShape{6, 6, 1});
}

Model trained_model(const Dataset& data, TrainConfig c = tiny_config()) {
  c.env = data.env;
  return Model(train(c, data).checkpoint);
}

std::vector<std::pair<Index, Vector>> first_patches(const PatchedImages& images, Index K) {
  std::vector<std::pair<Index, Vector>> out;
  for (Index p = 0; p < K; ++p) out.emplace_back(p, images.patches[0][static_cast<std::size_t>(p)]);
  return out;
}

}  // namespace

TEST(Dataset, TensorRoundTrip) {
  for (const Dataset& d : {tiny_images(), tiny_grid(), tiny_bars()}) {
    const TensorRecord r = d.to_tensor();
    const Dataset back = Dataset::from_tensor(d.env, r, PatchGrid{});
    EXPECT_EQ(back.to_tensor().values, r.values) << d.env;
    EXPECT_EQ(back.observation_dim(), d.observation_dim());
    EXPECT_EQ(back.action_dim(), d.action_dim());
    EXPECT_EQ(back.item_count(), d.item_count());
  }
}

TEST(Dataset, RejectsOutOfRangeValues) {
  TensorRecord r = tiny_images().to_tensor();
  r.values[3] = 1.5;
  EXPECT_THROW(Dataset::from_tensor("eyemove", r, PatchGrid{}), FormatError);
  const TensorRecord flat{{2, 3, 4}, DType::f32, std::vector<double>(24, 0.5)};
  EXPECT_THROW(Dataset::from_tensor("sequence", flat, PatchGrid{}), FormatError);
  EXPECT_THROW(Dataset::from_tensor("atari", tiny_images().to_tensor(), PatchGrid{}), FormatError);
}

TEST(Train, ZeroEpochsReturnsInitialisation) {
  TrainConfig c = tiny_config();
  c.epochs = 0;
  const Dataset d = tiny_images();
  const TrainResult r = train(c, d);
  EXPECT_TRUE(r.log.epochs.empty());
  EXPECT_EQ(params_hash(r.checkpoint.params), params_hash(initial_checkpoint(c, d).params));
  EXPECT_EQ(r.checkpoint.step, 0);
}

TEST(Train, StepsPerEpoch) {
  TrainConfig c = tiny_config();
  EXPECT_EQ(steps_per_epoch(c, tiny_images()), 12);   // 3 images x 16 patches / 4
  EXPECT_EQ(steps_per_epoch(c, tiny_grid()), 9);      // 9 cells x 4 moves / 4
  EXPECT_EQ(steps_per_epoch(c, tiny_bars()), 6);      // one batch of 6-frame sequences
  c.steps_per_epoch = 5;
  EXPECT_EQ(steps_per_epoch(c, tiny_images()), 5);
}

TEST(Train, ConstantImageProgress) {
  Image img(28, 28, 1);
  img.data.setConstant(0.6);
  const Dataset d = Dataset::eyemove({img}, PatchGrid{});
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainConfig c;
    c.widths = {256, 256};
    c.batch_size = 16;
    c.epochs = 25;
    c.seed = seed;
    const TrainResult r = train(c, d);
    ASSERT_EQ(r.log.epochs.size(), 25u);
    EXPECT_LT(r.log.epochs.back().mse, r.log.epochs.front().mse) << "seed " << seed;
  }
}

TEST(Train, LossesAreNonNegativeAndRowsNumbered) {
  for (const Dataset& d : {tiny_images(), tiny_grid(), tiny_bars()}) {
    TrainConfig c = tiny_config(d.env);
    const TrainResult r = train(c, d);
    ASSERT_EQ(r.log.epochs.size(), 2u);
    for (std::size_t e = 0; e < r.log.epochs.size(); ++e) {
      const MetricsRow& row = r.log.epochs[e];
      EXPECT_EQ(row.epoch, static_cast<int>(e) + 1);
      EXPECT_EQ(row.step, static_cast<long>(e + 1) * steps_per_epoch(c, d));
      ASSERT_EQ(row.losses.size(), 2u);
      for (double l : row.losses) EXPECT_GE(l, 0.0);
    }
  }
}

TEST(Train, TraceHasOneRowPerStep) {
  TrainConfig c = tiny_config();
  c.trace = true;
  const Dataset d = tiny_images();
  const TrainResult r = train(c, d);
  EXPECT_EQ(r.log.trace.size(), static_cast<std::size_t>(2 * steps_per_epoch(c, d)));
}

TEST(Train, PhaseOrderPerTimestep) {
  TrainConfig c = tiny_config();
  c.epochs = 1;
  c.steps_per_epoch = 3;
  std::vector<PhaseEvent> events;
  train(c, tiny_images(), [&](const PhaseEvent& e) { events.push_back(e); });
  const std::vector<Phase> one_step{Phase::predict, Phase::receive, Phase::learn, Phase::infer,
                                    Phase::learn,   Phase::infer,   Phase::memory_update};
  ASSERT_EQ(events.size(), 3 * one_step.size());
  for (std::size_t i = 0; i < events.size(); ++i) {
    EXPECT_EQ(events[i].phase, one_step[i % one_step.size()]) << i;
  }
  EXPECT_EQ(events[2].layer, 0);
  EXPECT_EQ(events[3].layer, 1);
  EXPECT_EQ(events[4].layer, 1);
  EXPECT_EQ(events[5].layer, 2);
}

TEST(Train, LearningConsumesThePrediction) {
  HierarchyParams p = initial_checkpoint(tiny_config(), tiny_images()).params;
  std::vector<RngStream> streams{RngStream(1, 0), RngStream(1, 1)};
  const Matrix m = Matrix::Constant(12, 2, 0.2);
  LayerStack st = sample_prior_stack(p, m, streams, PriorMode::direct);
  const std::vector<std::uint64_t> prior{hash_matrix(st.s_hat[1]), hash_matrix(st.s_hat[2])};
  std::vector<PhaseEvent> events;
  step_observation(p, st, m, Matrix::Constant(4, 2, 0.5), streams, {},
                   [&](const PhaseEvent& e) { events.push_back(e); });
  std::vector<std::uint64_t> consumed;
  for (const auto& e : events)
    if (e.phase == Phase::learn) consumed.push_back(e.input_hash);
  ASSERT_EQ(consumed.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(consumed[l], prior[l]);
    EXPECT_NE(consumed[l], hash_matrix(st.s[l + 1]));
  }
}

TEST(Train, MemoryNetworkIsImmutable) {
  const TrainConfig c = tiny_config();
  const Dataset d = tiny_images();
  const Checkpoint before = initial_checkpoint(c, d);
  const TrainResult r = train(c, d);
  const CannNetwork net(r.checkpoint.cann);
  EXPECT_EQ(hash_matrix(net.W()), before.W_hash);
  EXPECT_EQ(hash_matrix(net.A()), before.A_hash);
  EXPECT_EQ(r.checkpoint.W_hash, before.W_hash);
}

TEST(Train, BatchOneIsReproducible) {
  for (const Dataset& d : {tiny_images(), tiny_grid(), tiny_bars()}) {
    TrainConfig c = tiny_config(d.env);
    c.batch_size = 1;
    c.steps_per_epoch = 6;
    const TrainResult a = train(c, d), b = train(c, d);
    EXPECT_EQ(params_hash(a.checkpoint.params), params_hash(b.checkpoint.params));
    EXPECT_EQ(format_metrics_csv(a.log.epochs, 2), format_metrics_csv(b.log.epochs, 2));
  }
}

TEST(Train, SeedChangesTheRun) {
  TrainConfig c = tiny_config();
  const Dataset d = tiny_images();
  const TrainResult a = train(c, d);
  c.seed += 1;
  EXPECT_NE(params_hash(a.checkpoint.params), params_hash(train(c, d).checkpoint.params));
}

TEST(Train, DivergenceCarriesEpochAndLog) {
  TrainConfig c = tiny_config();
  c.epochs = 3;
  c.inv_tau_theta = 1e3;
  try {
    train(c, tiny_images());
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_GE(e.epoch, 1);
    EXPECT_EQ(e.log.epochs.size(), static_cast<std::size_t>(e.epoch - 1));
  }
}

TEST(Eval, DoesNotMutateWeights) {
  const Dataset d = tiny_images();
  const Model model = trained_model(d);
  const auto h = params_hash(model.params());
  const auto w = hash_matrix(model.network.W());
  const auto a = hash_matrix(model.network.A());
  evaluate_eyemove(model, *d.images, 4, 1);
  EXPECT_EQ(params_hash(model.params()), h);
  EXPECT_EQ(hash_matrix(model.network.W()), w);
  EXPECT_EQ(hash_matrix(model.network.A()), a);
}

TEST(InitProtocol, Contracts) {
  const Dataset d = tiny_images();
  const Model model = trained_model(d);
  auto all = first_patches(*d.images, 16);
  EXPECT_NO_THROW(init_memory_protocol(model, all, 1));
  all.emplace_back(0, d.images->patches[0][0]);
  EXPECT_THROW(init_memory_protocol(model, all, 1), ContractViolation);
  EXPECT_THROW(init_memory_protocol(model, {}, 1), ContractViolation);
  const Model grid = trained_model(tiny_grid());
  EXPECT_THROW(init_memory_protocol(grid, {{0, Vector::Zero(9)}}, 1), ContractViolation);
}

TEST(InitProtocol, DeterministicAndFrozen) {
  const Dataset d = tiny_images();
  const Model model = trained_model(d);
  const auto h = params_hash(model.params());
  const auto patches = first_patches(*d.images, 5);
  const StreamMemory a = init_memory_protocol(model, patches, 9);
  const StreamMemory b = init_memory_protocol(model, patches, 9);
  const StreamMemory c = init_memory_protocol(model, patches, 10);
  EXPECT_EQ(a.state.I, b.state.I);
  EXPECT_EQ(a.state.V, b.state.V);
  EXPECT_EQ(a.pending_top, b.pending_top);
  EXPECT_NE(a.state.I, c.state.I);
  EXPECT_EQ(params_hash(model.params()), h);
}

TEST(InitProtocol, WarmUpRunsTwoKSteps) {
  const Dataset d = tiny_images();
  const Model model = trained_model(d);
  Episode ep;
  for (int t = 0; t < 6; ++t) {
    ep.actions.push_back(one_hot(t % 3, 16));
    ep.observations.push_back(d.images->patches[0][static_cast<std::size_t>(t % 3)]);
  }
  int predicts = 0, updates = 0;
  std::vector<Vector> preds;
  warm_memory(model, ep, 1, &preds, [&](const PhaseEvent& e) {
    predicts += e.phase == Phase::predict;
    updates += e.phase == Phase::memory_update;
    EXPECT_NE(e.phase, Phase::learn);
  });
  EXPECT_EQ(predicts, 6);
  EXPECT_EQ(updates, 5);
  EXPECT_EQ(preds.size(), 6u);
}

TEST(WholeImage, ShapeAndClamp) {
  const Dataset d = tiny_images();
  const Model model = trained_model(d);
  const StreamMemory mem = init_memory_protocol(model, first_patches(*d.images, 3), 1);
  const Image img = generate_whole_image(model, mem);
  EXPECT_EQ(img.height, 8);
  EXPECT_EQ(img.width, 8);
  EXPECT_EQ(img.channels, 1);
  EXPECT_GE(img.data.minCoeff(), 0.0);
  EXPECT_LE(img.data.maxCoeff(), 1.0);
}

TEST(WholeImage, SequentialMatchesOneRollout) {
  const Dataset d = tiny_images();
  const Model model = trained_model(d);
  const StreamMemory mem = init_memory_protocol(model, first_patches(*d.images, 3), 1);
  std::vector<Vector> actions;
  for (Index p = 0; p < 16; ++p) actions.push_back(one_hot(p, 16));
  std::vector<Vector> patches = imagine(model, mem, actions);
  for (auto& v : patches) v = v.cwiseMax(0.0).cwiseMin(1.0);
  const Image expected = unpatchify(patches, PatchGrid{}, 8, 8, 1);
  EXPECT_EQ(generate_whole_image(model, mem, true).data, expected.data);
  // First position sees the same memory either way.
  const Image copies = generate_whole_image(model, mem);
  for (Index r = 0; r < 2; ++r) {
    for (Index c = 0; c < 2; ++c) EXPECT_EQ(copies.at(r, c), expected.at(r, c));
  }
}

TEST(WholeImage, GroundTruthPatchesReassemble) {
  const Dataset d = tiny_images();
  for (std::size_t i = 0; i < d.images->images.size(); ++i) {
    const Image back = unpatchify(d.images->patches[i], PatchGrid{}, 8, 8, 1);
    EXPECT_EQ(back.data, d.images->images[i].data);
  }
}

TEST(WholeImage, FittedDecoderReconstructs) {
  // One image; theta^0 is solved so that the readout of every queried memory
  // state equals that position's patch.
  const std::vector<Image> imgs = synth_smooth_images(1, 28, 28, 1, 5);
  const Dataset d = Dataset::eyemove(imgs, PatchGrid{});
  TrainConfig c;
  c.widths = {64};
  c.alpha = 0.5;
  c.action_gain = 4.0;
  Checkpoint ck = initial_checkpoint(c, d);
  Model model(ck);
  const StreamMemory mem = init_memory_protocol(model, first_patches(*d.images, 16), 2);
  Matrix F(64, 16), Y(49, 16);
  for (Index p = 0; p < 16; ++p) {
    const MemoryState s = memory_update(model.network, mem.state, Matrix(mem.pending_top),
                                        Matrix(one_hot(p, 16)), c.memory_time(), c.dt);
    F.col(p) = leaky_relu(s.m, c.slope).col(0);
    Y.col(p) = d.images->patches[0][static_cast<std::size_t>(p)];
  }
  ck.params.theta[0] = F.transpose().colPivHouseholderQr().solve(Y.transpose()).transpose();
  const Model fitted(ck);
  const double residual = (fitted.params().theta[0] * F - Y).squaredNorm() / Y.size();
  ASSERT_LT(residual, 1e-8);
  const Image out = generate_whole_image(fitted, mem);
  EXPECT_LT((out.data - imgs[0].data).squaredNorm() / out.data.size(), 1e-2);
}

TEST(Imagine, EmptyAndDeterministic) {
  const Dataset d = tiny_grid();
  const Model model = trained_model(d);
  const StreamMemory mem = warm_memory(model, Episode{}, 1);
  EXPECT_TRUE(imagine(model, mem, {}).empty());
  const std::vector<Vector> actions{one_hot(0, 4), one_hot(3, 4), one_hot(1, 4)};
  const auto a = imagine(model, mem, actions);
  const auto b = imagine(model, mem, actions);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a, b);
  EXPECT_EQ(imagine(model, mem, actions, false, 4), imagine(model, mem, actions, false, 4));
  EXPECT_NE(imagine(model, mem, actions, false, 4), a);
  EXPECT_THROW(imagine(model, mem, {one_hot(0, 16)}), ContractViolation);
}

TEST(EvaluateMse, Examples) {
  const std::vector<Vector> truth{Vector::LinSpaced(5, 0, 1), Vector::Constant(5, 0.3)};
  EXPECT_EQ(evaluate_mse(truth, truth), 0.0);
  std::vector<Vector> shifted = truth;
  for (auto& v : shifted) v.array() += 0.1;
  EXPECT_NEAR(evaluate_mse(shifted, truth), 0.01, 1e-15);
  EXPECT_THROW(evaluate_mse({Vector::Zero(4)}, truth), ContractViolation);
}

TEST(EvaluateMse, MatchesScalarLoop) {
  RngStream rng(3, 0);
  std::vector<Vector> a(7, Vector(11)), b(7, Vector(11));
  double sum = 0.0;
  for (std::size_t i = 0; i < 7; ++i) {
    for (Index k = 0; k < 11; ++k) {
      a[i][k] = rng.uniform();
      b[i][k] = rng.uniform();
      sum += (a[i][k] - b[i][k]) * (a[i][k] - b[i][k]);
    }
  }
  EXPECT_NEAR(evaluate_mse(a, b), sum / 77.0, 1e-12);
}

TEST(EyeEval, ReportsBothColumns) {
  const Dataset d = tiny_images();
  const Model model = trained_model(d);
  const EyeEvalResult full = evaluate_eyemove(model, *d.images, 16, 1);
  EXPECT_TRUE(std::isnan(full.mse_unseen));
  EXPECT_EQ(full.reconstructions.size(), 3u);
  const EyeEvalResult part = evaluate_eyemove(model, *d.images, 4, 1, 2);
  EXPECT_EQ(part.reconstructions.size(), 2u);
  EXPECT_EQ(part.seen_positions[0].size(), 4u);
  EXPECT_TRUE(std::is_sorted(part.seen_positions[0].begin(), part.seen_positions[0].end()));
  EXPECT_GE(part.mse_unseen, 0.0);
  const EyeEvalResult again = evaluate_eyemove(model, *d.images, 4, 1, 2);
  EXPECT_EQ(again.mse_all, part.mse_all);
}

TEST(Replay, SplitsInitAndFuture) {
  const Dataset d = tiny_bars();
  const Model model = trained_model(d);
  const ReplayResult r = evaluate_replay(model, d.sequences, 2, 1);
  ASSERT_EQ(r.predictions.size(), 3u);
  EXPECT_EQ(r.predictions[0].size(), 6u);
  const double weighted = (2 * r.mse_init + 4 * r.mse_future) / 6;
  EXPECT_NEAR(r.mse_all, weighted, 1e-12);
  EXPECT_THROW(evaluate_replay(model, d.sequences, 7, 1), ContractViolation);
}

TEST(Checkpoint, RoundTrip) {
  TempDir dir;
  const Dataset d = tiny_images();
  const Model model = trained_model(d);
  save_checkpoint(dir / "ck", model.checkpoint);
  const Checkpoint back = load_checkpoint(dir / "ck");
  ASSERT_EQ(back.params.theta.size(), 2u);
  for (std::size_t l = 0; l < 2; ++l) EXPECT_EQ(back.params.theta[l], model.params().theta[l]);
  EXPECT_EQ(back.params.lambda, model.params().lambda);
  EXPECT_EQ(back.config.to_text(), model.config().to_text());
  EXPECT_EQ(back.step, model.checkpoint.step);
  EXPECT_EQ(back.meta.action_dim, 16);
  EXPECT_EQ(back.shape.height, 8);
  EXPECT_EQ(Model(back).network.W(), model.network.W());
}

TEST(Checkpoint, TamperingIsDetected) {
  TempDir dir;
  const Model model = trained_model(tiny_images());
  save_checkpoint(dir / "ck", model.checkpoint);

  auto rewrite = [&](const std::string& key, const std::string& value) {
    Manifest m = read_manifest(dir / "ck/manifest.txt");
    for (auto& [k, v] : m)
      if (k == key) v = value;
    write_text_atomic(dir / "ck/manifest.txt", format_manifest(m));
  };
  const Manifest original = read_manifest(dir / "ck/manifest.txt");

  rewrite("seed_W", "12345");
  EXPECT_THROW(load_checkpoint(dir / "ck"), FormatError);
  write_text_atomic(dir / "ck/manifest.txt", format_manifest(original));

  rewrite("theta_hash", "1");
  EXPECT_THROW(load_checkpoint(dir / "ck"), FormatError);
  write_text_atomic(dir / "ck/manifest.txt", format_manifest(original));

  HierarchyParams p = model.params();
  p.theta[0](0, 0) += 1.0;
  write_tensor(dir / "ck/theta_0.ebmt", matrix_record(p.theta[0]));
  EXPECT_THROW(load_checkpoint(dir / "ck"), FormatError);

  EXPECT_THROW(load_checkpoint(dir / "missing"), FormatError);
}

TEST(Memory, RoundTrip) {
  TempDir dir;
  const Dataset d = tiny_images();
  const Model model = trained_model(d);
  const StreamMemory mem = init_memory_protocol(model, first_patches(*d.images, 4), 1);
  save_memory(dir / "m.ebmt", mem);
  const StreamMemory back = load_memory(dir / "m.ebmt", model);
  EXPECT_EQ(back.state.I, mem.state.I);
  EXPECT_EQ(back.state.m, mem.state.m);
  EXPECT_EQ(back.state.V, mem.state.V);
  EXPECT_EQ(back.pending_top, mem.pending_top);
  write_tensor(dir / "bad.ebmt", matrix_record(Matrix::Zero(3, 12)));
  EXPECT_THROW(load_memory(dir / "bad.ebmt", model), FormatError);
}
