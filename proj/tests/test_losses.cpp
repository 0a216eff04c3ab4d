#include <cmath>
#include <random>

#include "doctest.h"
#include "kd/diagnostics.hpp"
#include "kd/losses.hpp"
#include "kd/ops.hpp"
#include "support.hpp"

using namespace kd;

namespace {

std::vector<double> softmax_row(const double* x, int n, double tau = 1.0) {
  double m = x[0] / tau;
  for (int i = 1; i < n; ++i) m = std::max(m, x[i] / tau);
  std::vector<double> p(static_cast<std::size_t>(n));
  double z = 0.0;
  for (int i = 0; i < n; ++i) z += (p[i] = std::exp(x[i] / tau - m));
  for (auto& v : p) v /= z;
  return p;
}

double kld(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / std::max(q[i], 1e-9));
  return s;
}

Tensor<double> logits_tensor(std::int64_t b, std::int64_t t, std::int64_t v, std::mt19937_64& rng, double scale = 3.0,
                             bool requires_grad = false) {
  return test::random_tensor({b, t, v}, rng, -scale, scale, requires_grad);
}

Mask random_mask(std::int64_t b, std::int64_t t, std::mt19937_64& rng) {
  Mask m(b, t);
  for (auto& v : m.values) v = static_cast<std::uint8_t>(rng() % 2);
  m.values[0] = 1;
  return m;
}

TargetGrid random_targets(std::int64_t b, std::int64_t t, int v, std::mt19937_64& rng) {
  TargetGrid g(b, t);
  for (auto& x : g.values) x = static_cast<std::int32_t>(rng() % static_cast<unsigned>(v));
  return g;
}

// Direct evaluation of the masked mean KLD between softmax(teacher / tau)
// and softmax(student / tau).
double oracle_pred_kld(const Tensor<double>& s, const Tensor<double>& t, const Mask& mask, double tau) {
  const auto v = static_cast<int>(s.dim(2));
  double total = 0.0;
  int count = 0;
  for (std::int64_t b = 0; b < mask.rows; ++b)
    for (std::int64_t p = 0; p < mask.cols; ++p) {
      if (!mask.at(b, p)) continue;
      const auto off = static_cast<std::size_t>((b * mask.cols + p) * v);
      total += kld(softmax_row(t.ptr() + off, v, tau), softmax_row(s.ptr() + off, v, tau));
      ++count;
    }
  return total / count;
}

std::vector<AttentionTrace<double>> random_traces(int layers, int batch, int heads, int seq, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<AttentionTrace<double>> out;
  for (int l = 0; l < layers; ++l) {
    Tensor<double> p({batch, heads, seq, seq});
    for (int b = 0; b < batch; ++b)
      for (int h = 0; h < heads; ++h)
        for (int t = 0; t < seq; ++t) {
          double* row = p.ptr() + ((b * heads + h) * seq + t) * seq;
          double z = 0.0;
          for (int i = 0; i <= t; ++i) z += (row[i] = u(rng));
          for (int i = 0; i <= t; ++i) row[i] /= z;
        }
    out.push_back({l, p});
  }
  return out;
}

double oracle_attn_kld(const std::vector<AttentionTrace<double>>& s, const std::vector<AttentionTrace<double>>& t,
                       const LayerHeadMap& map, const Mask& rows) {
  double total = 0.0;
  int count = 0;
  for (std::size_t l = 0; l < s.size(); ++l) {
    const auto& st = s[l];
    const auto& tt = t[static_cast<std::size_t>(map.layer_map[l])];
    const auto seq = st.seq();
    for (std::int64_t b = 0; b < rows.rows; ++b)
      for (std::int64_t r = 0; r < seq; ++r) {
        if (!rows.at(b, r)) continue;
        if (map.head_policy == HeadPolicy::identity) {
          for (std::int64_t h = 0; h < st.heads(); ++h) {
            const auto ps = st.row(b, h, r);
            const auto pt = tt.row(b, h, r);
            total += kld({pt.begin(), pt.end()}, {ps.begin(), ps.end()});
            ++count;
          }
        } else {
          auto avg = [&](const AttentionTrace<double>& tr) {
            std::vector<double> a(static_cast<std::size_t>(r + 1), 0.0);
            for (std::int64_t h = 0; h < tr.heads(); ++h) {
              const auto row = tr.row(b, h, r);
              for (std::size_t i = 0; i < a.size(); ++i) a[i] += row[i] / static_cast<double>(tr.heads());
            }
            return a;
          };
          total += kld(avg(tt), avg(st));
          ++count;
        }
      }
  }
  return total / count;
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("ce_loss: perfect prediction, uniform logits, mask semantics") {
    Graph<double> g(false);
    SUBCASE("perfect prediction is zero") {
      Tensor<double> logits({1, 2, 3}, {0, 800, 0, 800, 0, 0});
      TargetGrid t(1, 2);
      t.values = {1, 0};
      Mask m(1, 2, 1);
      CHECK(ce_loss(g, logits, t, m).scalar() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("uniform logits over V=4 give ln 4") {
      Tensor<double> logits({2, 3, 4}, std::vector<double>(24, 0.7));
      std::mt19937_64 rng(1);
      auto t = random_targets(2, 3, 4, rng);
      Mask m(2, 3, 1);
      CHECK(std::abs(ce_loss(g, logits, t, m).scalar() - std::log(4.0)) < 1e-12);
      CHECK(std::abs(std::log(4.0) - 1.3863) < 1e-4);
    }
    SUBCASE("masking half the batch equals computing on that half") {
      std::mt19937_64 rng(2);
      auto logits = logits_tensor(2, 4, 5, rng);
      auto t = random_targets(2, 4, 5, rng);
      Mask half(2, 4, 0);
      for (int p = 0; p < 4; ++p) half.at(0, p) = 1;
      const double masked = ce_loss(g, logits, t, half).scalar();
      Tensor<double> first({1, 4, 5}, {logits.data().begin(), logits.data().begin() + 20});
      TargetGrid t1(1, 4);
      t1.values.assign(t.values.begin(), t.values.begin() + 4);
      CHECK(std::abs(masked - ce_loss(g, first, t1, Mask(1, 4, 1)).scalar()) < 1e-12);
    }
    SUBCASE("all-zero mask is an error unless a denominator is given") {
      std::mt19937_64 rng(3);
      auto logits = logits_tensor(1, 2, 3, rng);
      TargetGrid t(1, 2);
      CHECK_THROWS_AS(ce_loss(g, logits, t, Mask(1, 2, 0)), EmptyLossError);
      CHECK(ce_loss(g, logits, t, Mask(1, 2, 0), 4.0).scalar() == 0.0);
    }
    SUBCASE("target outside the vocabulary") {
      Tensor<double> logits({1, 1, 3});
      TargetGrid t(1, 1, 3);
      CHECK_THROWS_AS(ce_loss(g, logits, t, Mask(1, 1, 1)), VocabularyError);
    }
  }

  TEST_CASE("ce_loss matches a direct evaluation and honors the denominator") {
    std::mt19937_64 rng(4);
    Graph<double> g(false);
    for (int trial = 0; trial < 20; ++trial) {
      auto logits = logits_tensor(2, 5, 7, rng);
      auto t = random_targets(2, 5, 7, rng);
      auto m = random_mask(2, 5, rng);
      double total = 0.0;
      for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t p = 0; p < 5; ++p) {
          if (!m.at(b, p)) continue;
          const auto q = softmax_row(logits.ptr() + (b * 5 + p) * 7, 7);
          total -= std::log(q[static_cast<std::size_t>(t.at(b, p))]);
        }
      const auto n = count_active(m);
      CHECK(std::abs(ce_loss(g, logits, t, m).scalar() - total / n) < 1e-12);
      CHECK(std::abs(ce_loss(g, logits, t, m, 10.0).scalar() - total / 10.0) < 1e-12);
      CHECK(ce_loss(g, logits, t, m).count == n);
    }
  }

  TEST_CASE("pred_kld examples") {
    Graph<double> g(false);
    // p = (0.75, 0.25) from logits (ln 3, 0); q uniform.
    Tensor<double> teacher({1, 2, 2}, {std::log(3.0), 0.0, std::log(3.0), 0.0});
    Tensor<double> student({1, 2, 2}, {0.0, 0.0, 0.0, 0.0});
    Mask m(1, 2, 1);
    const double want = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
    const double got = pred_kld(g, student, teacher, m).scalar();
    CHECK(std::abs(got - want) < 1e-12);
    CHECK(std::abs(got - 0.1308) < 1e-4);
    CHECK(pred_kld(g, teacher, teacher, m).scalar() == 0.0);
  }

  TEST_CASE("pred_kld matches the oracle for several temperatures") {
    std::mt19937_64 rng(5);
    Graph<double> g(false);
    for (double tau : {0.5, 1.0, 2.0, 4.0}) {
      auto s = logits_tensor(2, 4, 6, rng);
      auto t = logits_tensor(2, 4, 6, rng);
      auto m = random_mask(2, 4, rng);
      CHECK(std::abs(pred_kld(g, s, t, m, tau).scalar() - oracle_pred_kld(s, t, m, tau)) < 1e-12);
    }
  }

  TEST_CASE("pred_kld argument errors") {
    std::mt19937_64 rng(6);
    Graph<double> g(false);
    auto s = logits_tensor(1, 2, 4, rng);
    auto t5 = logits_tensor(1, 2, 5, rng);
    Mask m(1, 2, 1);
    CHECK_THROWS_AS(pred_kld(g, s, t5, m), TokenizerError);
    CHECK_THROWS_AS(pred_kld(g, s, s, m, 0.0), ConfigError);
    auto t3 = logits_tensor(1, 3, 4, rng);
    CHECK_THROWS_AS(pred_kld(g, s, t3, Mask(1, 3, 1)), DimensionError);
  }

  TEST_CASE("padding rows with zero masks never change a loss") {
    std::mt19937_64 rng(7);
    Graph<double> g(false);
    for (int trial = 0; trial < 20; ++trial) {
      auto s = logits_tensor(2, 3, 5, rng);
      auto t = logits_tensor(2, 3, 5, rng);
      auto targets = random_targets(2, 3, 5, rng);
      auto m = random_mask(2, 3, rng);
      auto pad = [&](const Tensor<double>& x) {
        std::vector<double> v(x.data().begin(), x.data().end());
        std::uniform_real_distribution<double> u(-9.0, 9.0);
        for (int i = 0; i < 15; ++i) v.push_back(u(rng));
        return Tensor<double>({3, 3, 5}, v);
      };
      Mask mp(3, 3, 0);
      std::copy(m.values.begin(), m.values.end(), mp.values.begin());
      TargetGrid tp(3, 3, 0);
      std::copy(targets.values.begin(), targets.values.end(), tp.values.begin());
      CHECK(std::abs(ce_loss(g, s, targets, m).scalar() - ce_loss(g, pad(s), tp, mp).scalar()) < 1e-7);
      CHECK(std::abs(pred_kld(g, s, t, m).scalar() - pred_kld(g, pad(s), pad(t), mp).scalar()) < 1e-7);
    }
  }

  TEST_CASE("build_layer_map") {
    auto same = build_layer_map(4, 4, 4, 4);
    CHECK(same.layer_map == std::vector<int>{0, 1, 2, 3});
    CHECK(same.head_policy == HeadPolicy::identity);
    auto deep = build_layer_map(4, 8, 4, 8);
    CHECK(deep.layer_map == std::vector<int>{1, 3, 5, 7});
    CHECK(deep.head_policy == HeadPolicy::average_heads);
    CHECK(build_layer_map(2, 3, 2, 2).layer_map == std::vector<int>{0, 2});
    CHECK_THROWS_AS(build_layer_map(5, 4, 2, 2), MappingError);
    CHECK_THROWS_AS(build_layer_map(0, 4, 2, 2), MappingError);
    for (int ls = 1; ls <= 8; ++ls)
      for (int lt = ls; lt <= 12; ++lt) {
        const auto m = build_layer_map(ls, lt, 2, 2);
        CHECK(m.layer_map.back() == lt - 1);
        for (int i = 0; i < ls; ++i) CHECK(m.layer_map[i] == (i + 1) * lt / ls - 1);
        for (int i = 1; i < ls; ++i) CHECK(m.layer_map[i] >= m.layer_map[i - 1]);
      }
  }

  TEST_CASE("attn_kld examples") {
    Graph<double> g(false);
    const auto map = build_layer_map(1, 1, 1, 1);
    // seq 2: row 0 is degenerate, row 1 compares (0.75, 0.25) with (0.5, 0.5).
    Tensor<double> tp({1, 1, 2, 2}, {1.0, 0.0, 0.75, 0.25});
    Tensor<double> sp({1, 1, 2, 2}, {1.0, 0.0, 0.5, 0.5});
    std::vector<AttentionTrace<double>> teacher{{0, tp}}, student{{0, sp}};
    Mask only_row0(1, 2, 0);
    only_row0.at(0, 0) = 1;
    CHECK(attn_kld(g, student, teacher, map, only_row0).scalar() == 0.0);
    Mask only_row1(1, 2, 0);
    only_row1.at(0, 1) = 1;
    const double want = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
    CHECK(std::abs(attn_kld(g, student, teacher, map, only_row1).scalar() - want) < 1e-12);
    // Averaged over both rows.
    CHECK(std::abs(attn_kld(g, student, teacher, map, Mask(1, 2, 1)).scalar() - want / 2) < 1e-12);
    CHECK(attn_kld(g, teacher, teacher, map, Mask(1, 2, 1)).scalar() == 0.0);
  }

  TEST_CASE("attn_kld matches the oracle under identity and head averaging") {
    std::mt19937_64 rng(8);
    Graph<double> g(false);
    for (int trial = 0; trial < 10; ++trial) {
      const auto s = random_traces(2, 2, 2, 5, rng);
      const auto t_same = random_traces(2, 2, 2, 5, rng);
      const auto t_deep = random_traces(4, 2, 4, 5, rng);
      const auto rows = random_mask(2, 5, rng);
      const auto id_map = build_layer_map(2, 2, 2, 2);
      const auto avg_map = build_layer_map(2, 4, 2, 4);
      CHECK(std::abs(attn_kld(g, s, t_same, id_map, rows).scalar() - oracle_attn_kld(s, t_same, id_map, rows)) <
            1e-12);
      CHECK(std::abs(attn_kld(g, s, t_deep, avg_map, rows).scalar() - oracle_attn_kld(s, t_deep, avg_map, rows)) <
            1e-12);
      CHECK(attn_kld(g, s, t_same, id_map, rows).count == attn_row_count(id_map, 2, rows));
      CHECK(attn_kld(g, s, t_deep, avg_map, rows).count == attn_row_count(avg_map, 2, rows));
    }
  }

  TEST_CASE("averaged heads still form distributions") {
    std::mt19937_64 rng(9);
    const auto t = random_traces(1, 1, 8, 6, rng);
    Graph<double> g(false);
    auto avg = ops::mean(g, t[0].probs, 1);
    for (std::int64_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::int64_t i = 0; i < 6; ++i) s += avg.data()[static_cast<std::size_t>(r * 6 + i)];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }

  TEST_CASE("attn_kld mapping errors") {
    std::mt19937_64 rng(10);
    Graph<double> g(false);
    const auto s = random_traces(2, 1, 2, 3, rng);
    const auto t = random_traces(1, 1, 2, 3, rng);
    LayerHeadMap bad;
    bad.layer_map = {0};  // second student layer unmapped
    CHECK_THROWS_AS(attn_kld(g, s, t, bad, Mask(1, 3, 1)), MappingError);
    LayerHeadMap missing;
    missing.layer_map = {0, 3};
    CHECK_THROWS_AS(attn_kld(g, s, t, missing, Mask(1, 3, 1)), MappingError);
    const auto t4 = random_traces(2, 1, 4, 3, rng);
    CHECK_THROWS_AS(attn_kld(g, s, t4, build_layer_map(2, 2, 2, 2), Mask(1, 3, 1)), MappingError);
  }

  TEST_CASE("kd_loss combines the terms exactly") {
    std::mt19937_64 rng(11);
    const auto cfg = test::tiny_config(2, 2, 8, 16, 16, 16);
    const auto student = init_model<double>(cfg, 1, 0.3);
    const auto teacher = init_model<double>(test::tiny_config(4, 4, 8, 16, 16, 16), 2, 0.3);
    const auto tb = test::random_tokens(2, 6, 16, rng);
    Graph<double> g(false);
    const auto so = forward(g, student, tb, true);
    const auto to = forward(g, teacher, tb, true);
    const auto map = build_layer_map(2, 4, 2, 4);
    const auto m = random_mask(2, 6, rng);
    const Mask rows(2, 6, 1);

    const double l_pred = pred_kld(g, so.logits, to.logits, m).scalar();
    const double l_attn = attn_kld(g, so.traces, to.traces, map, rows).scalar();
    for (auto w : {KdWeights{1.0, 1.0}, KdWeights{0.7, 1.3}, KdWeights{1.0, 0.0}, KdWeights{0.0, 1.0}}) {
      const auto kd = kd_loss(g, so, to, m, rows, map, w);
      REQUIRE(kd.bundle.l_kd.has_value());
      CHECK(*kd.bundle.l_pred == l_pred);
      CHECK(*kd.bundle.l_attn == l_attn);
      CHECK(*kd.bundle.l_kd == w.pred * *kd.bundle.l_pred + w.attn * *kd.bundle.l_attn);
      CHECK(std::abs(kd.total.item() - *kd.bundle.l_kd) < 1e-12);
      if (w.attn == 0.0) CHECK(*kd.bundle.l_kd == *kd.bundle.l_pred);
      if (w.pred == 0.0) CHECK(*kd.bundle.l_kd == *kd.bundle.l_attn);
    }
    // Self-distillation fixed point.
    const auto self = kd_loss(g, so, so, m, rows, build_layer_map(2, 2, 2, 2), KdWeights{});
    CHECK(*self.bundle.l_kd == 0.0);
  }

  TEST_CASE("dae_loss routes rows to the expert or the reference") {
    std::mt19937_64 rng(12);
    Graph<double> g(false);
    for (int trial = 0; trial < 20; ++trial) {
      auto s = logits_tensor(4, 3, 6, rng);
      auto e = logits_tensor(4, 3, 6, rng);
      auto r = logits_tensor(4, 3, 6, rng);
      const auto m = Mask(4, 3, 1);
      std::vector<bool> flags = {true, false, (trial % 2) == 0, false};
      const auto d = dae_loss(g, s, e, r, flags, m);
      const double want_d = oracle_pred_kld(s, e, rows_where(m, flags, true), 1.0);
      const double want_nd = oracle_pred_kld(s, r, rows_where(m, flags, false), 1.0);
      CHECK(std::abs(*d.bundle.l_d - want_d) < 1e-12);
      CHECK(std::abs(*d.bundle.l_nd - want_nd) < 1e-12);
      CHECK(*d.bundle.l_dae == *d.bundle.l_d + *d.bundle.l_nd);
    }
    SUBCASE("all flags true leaves the non-domain side empty") {
      auto s = logits_tensor(2, 3, 6, rng);
      auto e = logits_tensor(2, 3, 6, rng);
      const auto d = dae_loss(g, s, e, s, {true, true}, Mask(2, 3, 1));
      CHECK(*d.bundle.l_nd == 0.0);
      CHECK(*d.bundle.l_dae == *d.bundle.l_d);
    }
    SUBCASE("student equal to the reference on non-domain rows gives exactly zero") {
      auto s = logits_tensor(2, 3, 6, rng);
      auto e = logits_tensor(2, 3, 6, rng);
      const auto d = dae_loss(g, s, e, s, {false, false}, Mask(2, 3, 1));
      CHECK(*d.bundle.l_nd == 0.0);
      CHECK(*d.bundle.l_dae == 0.0);
    }
  }

  TEST_CASE("rows_where keeps only flagged rows") {
    Mask m(3, 2, 1);
    const auto kept = rows_where(m, {true, false, true}, true);
    CHECK(kept.values == std::vector<std::uint8_t>{1, 1, 0, 0, 1, 1});
    CHECK_THROWS_AS(rows_where(m, {true}, true), DimensionError);
  }

  TEST_CASE("no gradient reaches the teacher") {
    std::mt19937_64 rng(13);
    const auto cfg = test::tiny_config(2, 2, 8, 16, 16, 16);
    auto student = init_model<double>(cfg, 3, 0.3);
    auto teacher = init_model<double>(cfg, 4, 0.3);
    student.set_trainable(true);
    teacher.set_trainable(true);
    const auto tb = test::random_tokens(2, 5, 16, rng);
    Graph<double> g;
    const auto so = forward(g, student, tb, true);
    const auto to = forward(g, teacher, tb, true);
    auto kd = kd_loss(g, so, to, Mask(2, 5, 1), Mask(2, 5, 1), build_layer_map(2, 2, 2, 2), KdWeights{});
    g.backward(kd.total);
    bool student_moved = false;
    for (const auto& p : student.parameters())
      for (double v : p.grad()) student_moved |= v != 0.0;
    CHECK(student_moved);
    for (const auto& p : teacher.parameters())
      for (double v : p.grad()) CHECK(v == 0.0);
  }

  TEST_CASE("shift_targets") {
    TokenBatch tb{1, 5, {1, 10, 3, 20, 2}};
    Mask resp(1, 5, 0);
    resp.at(0, 3) = 1;
    resp.at(0, 4) = 1;
    const auto st = shift_targets(tb, resp);
    CHECK(st.targets.values == std::vector<std::int32_t>{10, 3, 20, 2, 0});
    CHECK(st.loss_mask.values == std::vector<std::uint8_t>{0, 0, 1, 1, 0});
  }

  TEST_CASE("every loss passes the float64 gradient check through a 2-layer model") {
    for (const auto& c : run_loss_gradchecks(3)) {
      INFO(c.loss);
      CHECK(c.result.max_rel_error < 1e-4);
      CHECK(c.result.elements_checked > 0);
    }
  }

  TEST_CASE("LossBundle accumulation") {
    LossBundle a, b;
    a.l_ce = 1.0;
    a.tokens_counted = 3;
    b.l_ce = 0.5;
    b.l_pred = 0.25;
    b.tokens_counted = 2;
    a += b;
    CHECK(*a.l_ce == 1.5);
    CHECK(*a.l_pred == 0.25);
    CHECK(a.tokens_counted == 5);
  }
}
