#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "random_tensors.hpp"
#include "smelab/checkpoint.hpp"
#include "smelab/errors.hpp"
#include "smelab/model.hpp"
#include "smelab/task_io.hpp"
#include "smelab/training.hpp"

using namespace smelab;
using smelab::testing::random_tensor;

namespace {

ModelConfig tiny_config(TaskKind task, std::size_t layers = 1) {
  ModelConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = layers;
  c.d_ffn = 6;
  c.task = task;
  c.max_seq_len = 10;
  return c;
}

// Replaces every zero-initialised bias with noise so the oracle exercises
// all parameters.
void perturb(TransformerModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (Tensor* t : m.parameters(ParamScope::kAll))
    for (auto& v : t->values()) v += normal(rng, 0.0, 0.05);
}

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat mm(const Mat& a, const Tensor& b, const Tensor& bias) {
  Mat out(a.size(), std::vector<double>(b.cols()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = bias.numel() ? bias[j] : 0.0;
      for (std::size_t k = 0; k < a[i].size(); ++k) s += a[i][k] * b.at(k, j);
      out[i][j] = s;
    }
  return out;
}

Mat ln(const Mat& x, const LayerNormParams& p) {
  Mat out = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i].size());
    double mu = 0.0, var = 0.0;
    for (double v : x[i]) mu += v;
    mu /= d;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= d;
    for (std::size_t j = 0; j < x[i].size(); ++j)
      out[i][j] = (x[i][j] - mu) / std::sqrt(var + 1e-5) * p.gain[j] + p.bias[j];
  }
  return out;
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

struct OracleResult {
  Mat logits;
  Mat last_query;
};

// Straight-line recomputation of the model for a single sequence.
OracleResult oracle_forward(const TransformerModel& m, const std::vector<int>& tokens) {
  const auto& c = m.config();
  const std::size_t T = tokens.size(), d = c.d_model, H = c.n_heads, dh = d / H;
  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < d; ++j)
      x[t][j] = m.token_embedding().at(static_cast<std::size_t>(tokens[t]), j) + m.position_embedding().at(t, j);
  Mat query;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& b = m.block(l);
    Mat h = ln(x, b.ln_attn);
    Mat q = mm(h, b.attn.wq, b.attn.bq), k = mm(h, b.attn.wk, b.attn.bk), v = mm(h, b.attn.wv, b.attn.bv);
    Mat ctx(T, std::vector<double>(d, 0.0));
    for (std::size_t hd = 0; hd < H; ++hd)
      for (std::size_t i = 0; i < T; ++i) {
        const std::size_t lim = c.task == TaskKind::kGeneration ? i + 1 : T;
        std::vector<double> w(lim);
        double mx = -1e300, z = 0.0;
        for (std::size_t j = 0; j < lim; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += q[i][hd * dh + e] * k[j][hd * dh + e];
          w[j] = s / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, w[j]);
        }
        for (auto& wj : w) z += (wj = std::exp(wj - mx));
        for (std::size_t j = 0; j < lim; ++j)
          for (std::size_t e = 0; e < dh; ++e) ctx[i][hd * dh + e] += w[j] / z * v[j][hd * dh + e];
      }
    Mat proj = mm(ctx, b.attn.wo, b.attn.bo);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += proj[i][j];
    Mat fq = ln(x, b.ln_ffn);
    if (l + 1 == c.n_layers) query = fq;
    Mat a = mm(fq, b.ffn.keys, b.ffn.key_bias);
    for (auto& row : a)
      for (auto& e : row) e = c.activation == Activation::kGeLU ? gelu_ref(e) : std::max(e, 0.0);
    Mat out = mm(a, b.ffn.values, b.ffn.value_bias);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < d; ++j) x[i][j] += out[i][j];
  }
  Mat hidden = ln(x, m.final_norm());
  OracleResult r{{}, query};
  if (c.task == TaskKind::kClassification) {
    r.logits = mm(Mat{hidden[0]}, m.head_weight(), m.head_bias());
  } else {
    Tensor emb_t = m.token_embedding().transposed();
    r.logits = mm(hidden, emb_t, m.head_bias());
  }
  return r;
}

ForwardOutput run(const TransformerModel& m, Tape& tape, const std::vector<std::vector<int>>& seqs) {
  return m.forward(tape, Batch::pack(seqs, m.config().pad_token));
}

PatchSet one_patch(std::size_t d, Rng& rng, double bias) {
  PatchSet p;
  p.keys = random_tensor({d, 1}, rng);
  p.bias = Tensor(Shape{1}, bias);
  p.raw_values = random_tensor({1, d}, rng);
  p.value_scale = Tensor({1, d}, 5.0);
  p.owner_edit_ids = {0};
  return p;
}

}  // namespace

TEST_CASE("ffn with zero keys returns the value bias") {
  Tape tape;
  FfnLayer layer{Tensor({3, 4}), Tensor(Shape{4}), Tensor({4, 3}, 2.0), Tensor::vector({1, -2, 3})};
  Rng rng(1);
  Tensor q = random_tensor({5, 3}, rng);
  auto out = ffn_forward(tape, layer, tape.constant_ref(q), Activation::kReLU);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(out.out.value().at(i, 0) == 1.0);
    CHECK(out.out.value().at(i, 1) == -2.0);
    CHECK(out.out.value().at(i, 2) == 3.0);
  }
}

TEST_CASE("ffn hand arithmetic") {
  Tape tape;
  FfnLayer layer{Tensor::from_rows({{1}, {0}}), Tensor(Shape{1}), Tensor::from_rows({{0, 1}}), Tensor(Shape{2})};
  Tensor q = Tensor::from_rows({{2, 5}});
  auto out = ffn_forward(tape, layer, tape.constant_ref(q), Activation::kReLU);
  CHECK(out.activations.value().item() == 2.0);
  CHECK(out.out.value().at(0, 0) == 0.0);
  CHECK(out.out.value().at(0, 1) == 2.0);
}

TEST_CASE("ffn equals explicit sum over memories") {
  Rng rng(7);
  for (Activation act : {Activation::kReLU, Activation::kGeLU}) {
    FfnLayer layer{random_tensor({6, 9}, rng), random_tensor({9}, rng), random_tensor({9, 6}, rng),
                   random_tensor({6}, rng)};
    Tensor q = random_tensor({4, 6}, rng);
    Tape tape;
    auto out = ffn_forward(tape, layer, tape.constant_ref(q), act);
    for (std::size_t r = 0; r < 4; ++r) {
      std::vector<double> expect(layer.value_bias.values().begin(), layer.value_bias.values().end());
      for (std::size_t i = 0; i < 9; ++i) {
        double pre = layer.key_bias[i];
        for (std::size_t j = 0; j < 6; ++j) pre += q.at(r, j) * layer.keys.at(j, i);
        const double a = act == Activation::kGeLU ? gelu_ref(pre) : std::max(pre, 0.0);
        for (std::size_t j = 0; j < 6; ++j) expect[j] += a * layer.values.at(i, j);
      }
      for (std::size_t j = 0; j < 6; ++j) CHECK(std::abs(out.out.value().at(r, j) - expect[j]) < 1e-12);
    }
  }
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = ModelConfig{};
  c.d_ffn = 0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  CHECK_NOTHROW(ModelConfig{}.validate());
  CHECK(task_kind_from_string("fact_check") == TaskKind::kClassification);
  CHECK(activation_from_string("relu") == Activation::kReLU);
  CHECK_THROWS_AS(activation_from_string("tanh"), ParameterError);
}

TEST_CASE("forward is deterministic") {
  TransformerModel m(ModelConfig{}, 3);
  std::vector<std::vector<int>> seqs{{1, 5, 9, 40}, {1, 7}};
  Tape t1(GradMode::kDisabled), t2(GradMode::kDisabled);
  CHECK(run(m, t1, seqs).logits.value().same_values(run(m, t2, seqs).logits.value()));
  TransformerModel m2(ModelConfig{}, 3);
  CHECK(m2.core_hash() == m.core_hash());
}

TEST_CASE("causal mask hides later tokens") {
  ModelConfig c;
  c.task = TaskKind::kGeneration;
  TransformerModel m(c, 5);
  Tape t1(GradMode::kDisabled), t2(GradMode::kDisabled);
  auto a = run(m, t1, {{1, 10, 20, 30, 40}}).logits.value();
  auto b = run(m, t2, {{1, 10, 20, 31, 41}}).logits.value();
  for (std::size_t t = 0; t < 3; ++t) {
    auto ra = a.row(t), rb = b.row(t);
    CHECK(std::equal(ra.begin(), ra.end(), rb.begin()));
  }
  auto r3a = a.row(3), r3b = b.row(3);
  CHECK_FALSE(std::equal(r3a.begin(), r3a.end(), r3b.begin()));
}

TEST_CASE("padding does not change any sequence's outputs") {
  for (TaskKind task : {TaskKind::kClassification, TaskKind::kGeneration}) {
    ModelConfig c;
    c.task = task;
    TransformerModel m(c, 8);
    Tape t1(GradMode::kDisabled), t2(GradMode::kDisabled);
    auto alone = run(m, t1, {{1, 9, 8}}).logits.value();
    auto padded = run(m, t2, {{1, 9, 8}, {1, 4, 5, 6, 7, 8}}).logits.value();
    const std::size_t rows = task == TaskKind::kClassification ? 1 : 3;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < alone.cols(); ++j) CHECK(alone.at(r, j) == padded.at(r, j));
  }
}

TEST_CASE("forward matches a straight-line recomputation") {
  for (TaskKind task : {TaskKind::kClassification, TaskKind::kGeneration}) {
    for (std::size_t layers : {1u, 2u}) {
      TransformerModel m(tiny_config(task, layers), 11 + layers);
      perturb(m, 99);
      std::vector<int> tokens{1, 4, 7, 2, 11, 5};
      Tape tape(GradMode::kDisabled);
      auto out = run(m, tape, {tokens});
      OracleResult o = oracle_forward(m, tokens);
      const Tensor& lg = out.logits.value();
      REQUIRE(lg.rows() == o.logits.size());
      double worst = 0.0;
      for (std::size_t i = 0; i < lg.rows(); ++i)
        for (std::size_t j = 0; j < lg.cols(); ++j) worst = std::max(worst, std::abs(lg.at(i, j) - o.logits[i][j]));
      CHECK(worst < 1e-10);
      double worst_q = 0.0;
      const Tensor& q = out.ffn_queries.value();
      for (std::size_t i = 0; i < q.rows(); ++i)
        for (std::size_t j = 0; j < q.cols(); ++j) worst_q = std::max(worst_q, std::abs(q.at(i, j) - o.last_query[i][j]));
      CHECK(worst_q < 1e-10);
    }
  }
}

TEST_CASE("forward rejects bad inputs") {
  TransformerModel m(tiny_config(TaskKind::kClassification), 1);
  Tape tape(GradMode::kDisabled);
  CHECK_THROWS_AS(run(m, tape, {std::vector<int>(11, 1)}), ShapeError);
  CHECK_THROWS_AS(run(m, tape, {{1, 12}}), IndexError);
  CHECK_THROWS_AS(run(m, tape, {{1, -1}}), IndexError);
}

TEST_CASE("argmax picks the largest, lowest index on ties") {
  std::vector<double> two{0.3, 0.9};
  CHECK(argmax(two) == 1);
  std::vector<double> tie{1.0, 2.0, 2.0};
  CHECK(argmax(tie) == 1);
}

TEST_CASE("classification predict is the argmax of the class logits") {
  TransformerModel m(ModelConfig{}, 21);
  std::vector<std::vector<int>> seqs{{1, 5, 6}, {1, 50, 60, 70}, {1, 100}};
  Tape tape(GradMode::kDisabled);
  auto logits = run(m, tape, seqs).logits.value();
  auto preds = predict_batch(m, seqs);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    REQUIRE(preds[i].tokens.size() == 1);
    CHECK(static_cast<std::size_t>(preds[i].tokens[0]) == argmax(logits.row(i)));
    CHECK(predict(m, seqs[i]) == preds[i]);
  }
}

TEST_CASE("greedy decoding follows forced logits") {
  ModelConfig c = tiny_config(TaskKind::kGeneration);
  TransformerModel m(c, 4);
  Tensor& bias = const_cast<Tensor&>(m.head_bias());
  bias[7] = 1e6;
  CHECK(predict(m, {1, 2}, 5).tokens == std::vector<int>(5, 7));
  // The length limit of the model also stops decoding.
  CHECK(predict(m, {1, 2, 4, 5, 6, 8}, 50).tokens.size() == 4);
  bias[7] = 0.0;
  bias[static_cast<std::size_t>(c.eos_token)] = 1e6;
  CHECK(predict(m, {1, 2}, 5).tokens.empty());
}

TEST_CASE("greedy decoding equals a stepwise argmax trace") {
  ModelConfig c;
  c.task = TaskKind::kGeneration;
  c.vocab_size = 30;
  TransformerModel m(c, 17);
  perturb(m, 3);
  for (std::vector<int> prompt : {std::vector<int>{1, 5}, {1, 9, 12, 4}, {1, 20, 21}}) {
    std::vector<int> seq = prompt, trace;
    for (int step = 0; step < 6; ++step) {
      OracleResult o = oracle_forward(m, seq);
      const auto& last = o.logits.back();
      const int next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
      if (next == c.eos_token) break;
      trace.push_back(next);
      seq.push_back(next);
    }
    CHECK(predict(m, prompt, 6).tokens == trace);
  }
}

TEST_CASE("teacher-forced verdict agrees with greedy exact match") {
  ModelConfig c;
  c.task = TaskKind::kGeneration;
  c.vocab_size = 16;
  TransformerModel m(c, 23);
  // Make the end token likely so decodes terminate inside the budget.
  const_cast<Tensor&>(m.head_bias())[3] = 1.5;
  Rng rng(5);
  int agree_true = 0;
  for (int i = 0; i < 40; ++i) {
    std::vector<int> prompt{1, 4 + static_cast<int>(uniform_index(rng, 12)), 4 + static_cast<int>(uniform_index(rng, 12))};
    Prediction p = predict(m, prompt, 8);
    const bool terminated = prompt.size() + p.tokens.size() < c.max_seq_len && p.tokens.size() < 8;
    if (terminated) {
      CHECK(judge(m, LabeledInput{prompt, p.tokens}).correct);
      ++agree_true;
    }
    std::vector<int> other = p.tokens;
    if (other.empty()) other.push_back(5);
    else other.back() = other.back() == 5 ? 6 : 5;
    CHECK_FALSE(judge(m, LabeledInput{prompt, other}).correct);
  }
  CHECK(agree_true > 0);
}

TEST_CASE("supervision positions for generation") {
  ModelConfig c;
  c.task = TaskKind::kGeneration;
  Supervision s = supervision(c, LabeledInput{{1, 8, 9, 4}, {30, 31}});
  CHECK(s.positions == std::vector<std::size_t>{3, 4, 5});
  CHECK(s.labels == std::vector<int>{30, 31, c.eos_token});
  CHECK(model_input(c, LabeledInput{{1, 8}, {30}}) == std::vector<int>{1, 8, 30});
}

TEST_CASE("inactive patches leave the model bit-identical") {
  for (TaskKind task : {TaskKind::kClassification, TaskKind::kGeneration}) {
    ModelConfig c;
    c.task = task;
    c.activation = Activation::kReLU;
    TransformerModel m(c, 13);
    std::vector<std::vector<int>> seqs{{1, 5, 9, 40}, {1, 7}};
    Tape t1(GradMode::kDisabled);
    Tensor before = run(m, t1, seqs).logits.value();
    Rng rng(2);
    m.add_patches(one_patch(c.d_model, rng, -1e6));
    Tape t2(GradMode::kDisabled);
    auto out = run(m, t2, seqs);
    CHECK(out.logits.value().same_values(before));
    REQUIRE(out.patch_activations.has_value());
    for (double a : out.patch_activations->value().values()) CHECK(a == 0.0);
  }
}

TEST_CASE("parameter count grows by 2d+1 per patch") {
  ModelConfig c;
  TransformerModel m(c, 1);
  TransformerModel twin(c, 99);
  CHECK(m.parameter_count() == twin.parameter_count());
  const std::size_t base = m.parameter_count();
  Rng rng(3);
  for (int i = 1; i <= 4; ++i) {
    m.add_patches(one_patch(c.d_model, rng, 0.0));
    CHECK(m.parameter_count() - base == static_cast<std::size_t>(i) * (2 * c.d_model + 1));
  }
  CHECK(m.core_parameter_count() == base);
}

TEST_CASE("captured queries are what the patched FFN consumes") {
  for (TaskKind task : {TaskKind::kClassification, TaskKind::kGeneration}) {
    ModelConfig c;
    c.task = task;
    TransformerModel m(c, 31);
    Rng rng(4);
    m.add_patches(one_patch(c.d_model, rng, 0.3));
    std::vector<std::vector<int>> seqs{{1, 5, 9, 40}, {1, 7, 8}};
    Batch batch = Batch::pack(seqs, c.pad_token);
    Tape tape(GradMode::kDisabled);
    auto out = m.forward(tape, batch);
    // Recompute the patch activations from the exposed queries.
    const Tensor& q = out.ffn_queries.value();
    const Tensor& ap = out.patch_activations->value();
    for (std::size_t r = 0; r < q.rows(); ++r) {
      double pre = m.patches().bias[0];
      for (std::size_t j = 0; j < c.d_model; ++j) pre += q.at(r, j) * m.patches().keys.at(j, 0);
      CHECK(std::abs(activate(pre, c.activation) - ap.at(r, 0)) < 1e-12);
    }
  }
}

TEST_CASE("cached tail reproduces the full forward exactly") {
  for (TaskKind task : {TaskKind::kClassification, TaskKind::kGeneration}) {
    ModelConfig c;
    c.task = task;
    TransformerModel m(c, 41);
    Rng rng(6);
    m.add_patches(one_patch(c.d_model, rng, 0.2));
    std::vector<std::vector<int>> seqs{{1, 5, 9, 40}, {1, 7, 8}};
    Batch batch = Batch::pack(seqs, c.pad_token);
    std::vector<std::size_t> rows, logit_rows;
    if (task == TaskKind::kClassification) {
      rows = {batch.row(0, 0), batch.row(1, 0)};
      logit_rows = {0, 1};
    } else {
      rows = {batch.row(0, 2), batch.row(1, 1), batch.row(0, 3)};
      logit_rows = rows;
    }
    PatchedLayerState state = m.capture_state(batch, rows);
    Tape t1(GradMode::kDisabled), t2(GradMode::kDisabled);
    Tensor full = m.forward(t1, batch).logits.value();
    Tensor tail = m.logits_from_state(t2, t2.constant(state.residual), t2.constant(state.query)).value();
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < full.cols(); ++j) CHECK(tail.at(i, j) == full.at(logit_rows[i], j));

    TransformerModel early = m;
    early.mutable_patches() = PatchSet::empty(c.d_model);
    early.set_patched_layer(0);
    Tape t3(GradMode::kDisabled);
    CHECK_THROWS_AS(early.logits_from_state(t3, t3.constant(state.residual), t3.constant(state.query)),
                    ContractViolation);
  }
}

TEST_CASE("patches on an earlier layer change downstream positions") {
  ModelConfig c;
  c.task = TaskKind::kGeneration;
  TransformerModel m(c, 5);
  m.set_patched_layer(0);
  std::vector<std::vector<int>> seqs{{1, 5, 9, 40}};
  Tape t1(GradMode::kDisabled);
  Tensor before = run(m, t1, seqs).logits.value();
  Rng rng(9);
  m.add_patches(one_patch(c.d_model, rng, 1.0));
  Tape t2(GradMode::kDisabled);
  CHECK_FALSE(run(m, t2, seqs).logits.value().same_values(before));
  CHECK_THROWS_AS(m.set_patched_layer(1), ContractViolation);
}

TEST_CASE("trainable scopes") {
  TransformerModel m(ModelConfig{}, 2);
  CHECK(m.parameters(ParamScope::kNone).empty());
  CHECK(m.parameters(ParamScope::kLastLayer).size() == 16);
  m.set_trainable(ParamScope::kLastLayer);
  std::size_t trainable = 0;
  for (const Tensor* t : m.parameters()) trainable += t->requires_grad() ? 1 : 0;
  CHECK(trainable == 16);
  m.set_trainable(ParamScope::kNone);
  for (const Tensor* t : m.parameters()) CHECK_FALSE(t->requires_grad());
}

namespace {

// Label is whether the second token falls in the upper half of the range.
Dataset separable_task(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    const int x = 4 + static_cast<int>(uniform_index(rng, 40));
    const int y = 4 + static_cast<int>(uniform_index(rng, 40));
    d.push_back({std::to_string(i), {1, x, y}, {x >= 24 ? 1 : 0}, {}, "train"});
  }
  return d;
}

// Answer repeats the three content tokens after a separator.
Dataset copy_task(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<int> body;
    for (int j = 0; j < 3; ++j) body.push_back(5 + static_cast<int>(uniform_index(rng, 10)));
    std::vector<int> prompt{1};
    prompt.insert(prompt.end(), body.begin(), body.end());
    prompt.push_back(4);
    d.push_back({std::to_string(i), prompt, body, {}, "train"});
  }
  return d;
}

}  // namespace

TEST_CASE("training reaches the floor on a separable task") {
  ModelConfig c;
  c.vocab_size = 48;
  c.d_model = 32;
  c.d_ffn = 64;
  TransformerModel m(c, 1);
  Dataset data = separable_task(600, 2);
  TrainOptions opt;
  opt.epochs = 40;
  opt.lr = 3e-3;
  opt.seed = 3;
  opt.accuracy_floor = 0.99;
  opt.stop_accuracy = 0.995;
  TrainReport r = train_initial(m, data, opt);
  CHECK(r.accuracy >= 0.99);
  CHECK(r.reached_floor);
  for (const Tensor* t : m.parameters()) CHECK_FALSE(t->requires_grad());

  TransformerModel again(c, 1);
  TrainReport r2 = train_initial(again, data, opt);
  CHECK(again.core_hash() == m.core_hash());
  CHECK(r2.epoch_losses == r.epoch_losses);
}

TEST_CASE("zero epochs leave the model unchanged") {
  TransformerModel m(ModelConfig{}, 8);
  const auto h = m.core_hash();
  TrainOptions opt;
  opt.epochs = 0;
  opt.accuracy_floor = 0.99;
  TrainReport r = train_initial(m, separable_task(50, 1), opt);
  CHECK(m.core_hash() == h);
  CHECK(r.epochs_run == 0);
}

TEST_CASE("unreached floor is reported") {
  TransformerModel m(ModelConfig{}, 8);
  Dataset d = separable_task(64, 1);
  // Contradictory labels cap the attainable accuracy at one half.
  Dataset flipped = d;
  for (auto& e : flipped) e.target[0] = 1 - e.target[0];
  d.insert(d.end(), flipped.begin(), flipped.end());
  TrainOptions opt;
  opt.epochs = 2;
  opt.accuracy_floor = 0.9;
  TrainReport r = train_initial(m, d, opt);
  CHECK_FALSE(r.reached_floor);
  CHECK(r.accuracy <= 0.5 + 1e-12);
}

TEST_CASE("training learns a copy task under teacher forcing") {
  ModelConfig c;
  c.task = TaskKind::kGeneration;
  c.vocab_size = 16;
  c.d_model = 32;
  c.d_ffn = 64;
  TransformerModel m(c, 3);
  Dataset data = copy_task(800, 4);
  TrainOptions opt;
  opt.epochs = 60;
  opt.lr = 3e-3;
  opt.seed = 5;
  opt.accuracy_floor = 0.95;
  opt.stop_accuracy = 0.98;
  TrainReport r = train_initial(m, data, opt);
  CHECK(r.token_accuracy >= 0.95);
  CHECK(r.reached_floor);
  MESSAGE("copy task epochs " << r.epochs_run << " token accuracy " << r.token_accuracy);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig c;
  c.task = TaskKind::kGeneration;
  c.activation = Activation::kReLU;
  TransformerModel m(c, 12);
  Rng rng(1);
  m.add_patches(one_patch(c.d_model, rng, 0.5));
  m.add_patches(one_patch(c.d_model, rng, -0.5));
  m.mutable_patches().owner_edit_ids = {3, 8};
  std::vector<CheckpointSection> extra{{"MEMB", {1, 2, 3}}};
  const auto path = (std::filesystem::temp_directory_path() / "smelab_ckpt_test.bin").string();
  save_checkpoint(path, m, extra);
  LoadedCheckpoint back = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(back.model.config() == c);
  CHECK(back.model.core_hash() == m.core_hash());
  CHECK(back.model.patches().keys.same_values(m.patches().keys));
  CHECK(back.model.patches().raw_values.same_values(m.patches().raw_values));
  CHECK(back.model.patches().owner_edit_ids == std::vector<std::int64_t>{3, 8});
  REQUIRE(back.find("MEMB") != nullptr);
  CHECK(back.find("MEMB")->payload == std::vector<std::uint8_t>{1, 2, 3});
  CHECK(encode_checkpoint(back.model, extra) == encode_checkpoint(m, extra));
}

TEST_CASE("checkpoint rejects corrupt files") {
  TransformerModel m(tiny_config(TaskKind::kClassification), 1);
  auto bytes = encode_checkpoint(m);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
  auto bad_version = bytes;
  bad_version[4] = 99;
  CHECK_THROWS_AS(decode_checkpoint(bad_version), VersionMismatch);
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/path.bin"), FormatError);
}
