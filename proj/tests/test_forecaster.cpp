#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "attention_oracle.hpp"
#include "caps/model/checkpoint.hpp"
#include "caps/numerics/grad_check.hpp"
#include "test_util.hpp"

namespace caps {
namespace {

using testing::random_array;

ForecasterConfig toy_config() {
  ForecasterConfig c;
  c.lookback = 16;
  c.horizon = 4;
  c.channels = 2;
  c.target_channels = 2;
  c.num_layers = 1;
  c.caps.num_heads = 1;
  c.caps.head_dim = 4;
  c.d_channel_token = 4;
  c.d_value_token = 4;
  c.ffn_expansion = 1;
  c.channel_dropout = false;
  return c;
}

// --- normalization ----------------------------------------------------------------

TEST(Normalize, CentersOnLastValue) {
  const Normalized n = last_value_normalize(Array({1, 2, 3}, {1, 2, 3, 5, 5, 5}));
  EXPECT_EQ(n.values, Array({1, 2, 3}, {-2, -1, 0, 0, 0, 0}));
  EXPECT_EQ(n.anchors, Array({1, 2}, {3, 5}));
}

TEST(Normalize, DenormalizeOfZeroIsNaiveForecast) {
  const Array y = denormalize(Array({1, 1, 4}), Array({1, 1}, {3.0}));
  EXPECT_EQ(y, Array({1, 1, 4}, 3.0));
  EXPECT_THROW(denormalize(Array({1, 2, 4}), Array({1, 1}, {3.0})), ConfigError);
}

TEST(NormalizeProperty, RoundTripAndConstantOffset) {
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const Array x = random_array({3, 4, 7}, rng, -50, 50);
    const Normalized n = last_value_normalize(x);
    const Array back = denormalize(n.values, n.anchors);
    EXPECT_LT(max_abs_diff(back, x), 1e-13);
    const Array y = random_array({3, 4, 5}, rng);
    const Array d = denormalize(y, n.anchors);
    for (std::size_t r = 0; r < 12; ++r)
      for (std::size_t t = 0; t < 5; ++t) EXPECT_NEAR(d[r * 5 + t] - y[r * 5 + t], n.anchors[r], 1e-13);
  }
}

// --- horizon extension ----------------------------------------------------------------

TEST(ExtendHorizon, ZeroAndLastValueCopy) {
  Tape tape;
  const Normalized n = last_value_normalize(Array({1, 1, 3}, {1, 4, 2}));
  const Var x = tape.constant(n.values);
  const Var zero = extend_horizon(x, tape.constant(Array({3, 2})));
  EXPECT_EQ(zero.value(), Array({1, 1, 5}, {-1, 2, 0, 0, 0}));
  const Var copy = extend_horizon(x, tape.constant(Array({3, 2}, {0, 0, 0, 0, 1, 1})));
  EXPECT_EQ(copy.value(), Array({1, 1, 5}, {-1, 2, 0, 0, 0}));
  EXPECT_THROW(extend_horizon(x, tape.constant(Array({2, 2}))), ConfigError);
}

TEST(ExtendHorizonProperty, MatchesLoopOracle) {
  Rng rng(9);
  Tape tape;
  const Array x = random_array({2, 3, 6}, rng), w = random_array({6, 4}, rng);
  const Array y = extend_horizon(tape.constant(x), tape.constant(w)).value();
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t t = 0; t < 6; ++t) EXPECT_EQ(y[r * 10 + t], x[r * 6 + t]);
    for (std::size_t s = 0; s < 4; ++s) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 6; ++k) acc += x[r * 6 + k] * w[k * 4 + s];
      EXPECT_NEAR(y[r * 10 + 6 + s], acc, 1e-12);
    }
  }
}

// --- tokenization ----------------------------------------------------------------------

TEST(Tokenize, SingleChannelAndZeroInput) {
  Tape tape;
  const Array u = Array({1, 2}, {0.5, -2.0});
  const Var tok = tokenize(tape.constant(Array({1, 1, 2}, {3.0, -1.0})), tape.constant(u),
                           tape.constant(Array({1, 1}, {0.25})));
  EXPECT_EQ(tok.value(), Array({1, 1, 2, 3}, {1.5, -6.0, 0.75, -0.5, 2.0, -0.25}));
  Rng rng(1);
  const Var z = tokenize(tape.constant(Array({2, 3, 4})), tape.constant(random_array({3, 2}, rng)),
                         tape.constant(random_array({3, 5}, rng)));
  EXPECT_EQ(z.value(), Array({2, 3, 4, 7}));
}

TEST(TokenizeProperty, MatchesLoopOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t B = 2, C = 1 + rng.below(4), T = 5, dc = 3, dv = 2;
    const Array x = random_array({B, C, T}, rng), wc = random_array({C, dc}, rng), ve = random_array({C, dv}, rng);
    Tape tape;
    const Array tok = tokenize(tape.constant(x), tape.constant(wc), tape.constant(ve)).value();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < T; ++t) {
          for (std::size_t j = 0; j < dc; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < C; ++k) acc += wc[k * dc + j] * x[(b * C + k) * T + t];
            EXPECT_NEAR(tok.at({b, c, t, j}), acc, 1e-12);
          }
          for (std::size_t j = 0; j < dv; ++j) EXPECT_NEAR(tok.at({b, c, t, dc + j}), x[(b * C + c) * T + t] * ve[c * dv + j], 1e-12);
        }
  }
}

TEST(TokenizeDecode, GradientsMatchFiniteDifferences) {
  Rng rng(12);
  const Array weights = random_array({2, 3, 6, 5}, rng);
  auto tok = [&](Tape& t, const std::vector<Var>& p) {
    return sum(mul(tokenize(p[0], p[1], p[2]), t.constant(weights)));
  };
  const auto r1 = grad_check(tok, {random_array({2, 3, 6}, rng), random_array({3, 2}, rng), random_array({3, 3}, rng)},
                             1e-5, 60, rng);
  EXPECT_LT(r1.max_rel_error, 1e-7);
  const Array wd = random_array({2, 2, 2}, rng);
  auto dec = [&](Tape& t, const std::vector<Var>& p) {
    return sum(mul(decode(p[0], p[1], {2, 0}, 3, 4), t.constant(wd)));
  };
  const auto r2 = grad_check(dec, {random_array({6, 6, 5}, rng), random_array({3, 3}, rng)}, 1e-5, 60, rng);
  EXPECT_LT(r2.max_rel_error, 1e-7);
}

// --- channel dropout ---------------------------------------------------------------------

TEST(ChannelDropout, ZeroRatioIsIdentity) {
  Rng rng(3);
  const Array x = random_array({2, 3, 5}, rng);
  std::vector<Rng> rngs{Rng(1), Rng(2)};
  const std::vector<double> r{0.0, 0.0};
  EXPECT_EQ(channel_dropout(x, r, rngs), x);
}

TEST(ChannelDropout, HalfRatioDoublesSurvivors) {
  // with many channels the all-masked correction vanishes below double precision
  const std::size_t C = 64;
  Array x({1, C, 2});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 1.0 + static_cast<double>(i);
  std::vector<Rng> rngs{Rng(5)};
  const std::vector<double> r{0.5};
  const Array y = channel_dropout(x, r, rngs);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_TRUE(y[i] == 0.0 || y[i] == 2.0 * x[i]);
    kept += y[i] != 0.0;
  }
  EXPECT_GT(kept, 0u);
  EXPECT_LT(kept, x.size());
}

TEST(ChannelDropoutProperty, UnbiasedWithGuaranteedSurvivor) {
  const std::size_t C = 4, draws = 100000;
  const Array x = Array({1, C, 1}, {1.0, -2.0, 3.0, 0.5});
  std::vector<double> mean(C, 0.0);
  Rng root(2026);
  for (std::size_t n = 0; n < draws; ++n) {
    std::vector<Rng> rngs{root.fork(n)};
    const Array y = channel_dropout(x, rngs);
    std::size_t kept = 0;
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] += y[c] / static_cast<double>(draws);
      kept += y[c] != 0.0;
    }
    ASSERT_GE(kept, 1u);
  }
  for (std::size_t c = 0; c < C; ++c) EXPECT_NEAR(mean[c] / x[c], 1.0, 0.01) << "channel " << c;
}

TEST(ChannelDropout, SingleChannelAlwaysSurvivesUnscaled) {
  std::vector<Rng> rngs{Rng(3)};
  const std::vector<double> r{0.9};
  EXPECT_EQ(channel_dropout(Array({1, 1, 3}, {1, 2, 3}), r, rngs), Array({1, 1, 3}, {1, 2, 3}));
}

// --- init and counts -------------------------------------------------------------------

TEST(InitParams, OutputProjectionScaleAndGains) {
  ForecasterConfig c = toy_config();
  c.num_layers = 3;
  c.d_channel_token = c.d_value_token = 32;
  c.caps.num_heads = 4;
  c.caps.head_dim = 16;
  c.ffn_expansion = 4;
  Rng rng(2026);
  const ForecasterParams p = init_params(c, rng);
  auto sample_std = [](const Array& a) {
    double ss = 0.0;
    for (double v : a.data()) ss += v * v;
    return std::sqrt(ss / static_cast<double>(a.size()));
  };
  std::vector<double> w_o, normal;
  for (const auto& l : p.layers) {
    EXPECT_EQ(l.norm_attn, Array({64}, 1.0));
    EXPECT_EQ(l.norm_ffn, Array({64}, 1.0));
    w_o.insert(w_o.end(), l.w_o.data().begin(), l.w_o.data().end());
    w_o.insert(w_o.end(), l.ffn_out.data().begin(), l.ffn_out.data().end());
    normal.insert(normal.end(), l.ffn_in.data().begin(), l.ffn_in.data().end());
    normal.insert(normal.end(), l.kernel.w_q.data().begin(), l.kernel.w_q.data().end());
  }
  ASSERT_GT(normal.size(), 50000u);
  EXPECT_NEAR(sample_std(Array({w_o.size()}, w_o)) / 0.0081649658092772603, 1.0, 0.03);
  EXPECT_NEAR(sample_std(Array({normal.size()}, normal)) / 0.02, 1.0, 0.03);
}

TEST(InitParams, EmpiricalStdOfHundredThousandWeights) {
  ForecasterConfig c = toy_config();
  c.lookback = 400;
  c.horizon = 250;
  Rng rng(7);
  const Array w = init_params(c, rng).w_ext;
  ASSERT_EQ(w.size(), 100000u);
  double s = 0, ss = 0;
  for (double v : w.data()) s += v, ss += v * v;
  const double mean = s / 1e5;
  EXPECT_NEAR(std::sqrt(ss / 1e5 - mean * mean) / 0.02, 1.0, 0.03);
}

TEST(ParamCount, HandEnumeratedToyBuild) {
  ForecasterConfig c;
  c.lookback = 4;
  c.horizon = 2;
  c.channels = 1;
  c.d_channel_token = c.d_value_token = 2;
  c.caps.num_heads = 1;
  c.caps.head_dim = 4;
  c.num_layers = 1;
  c.ffn_expansion = 2;
  // w_ext 8, w_chan 2, V 2, q/k/v 3*16, gates 3*4, omega 2, w_o 16, gains 8, ffn 2*32
  EXPECT_EQ(param_count(c), 162u);
  Rng rng(1);
  EXPECT_EQ(param_count(init_params(c, rng)), 162u);
  ForecasterConfig c2 = c;
  c2.horizon = 4;
  EXPECT_EQ(param_count(c2) - param_count(c), c.lookback * c.horizon);
}

// --- forward ------------------------------------------------------------------------------

ForecasterParams zero_except_value_embed(const ForecasterConfig& c, Rng& rng) {
  ForecasterParams p = init_params(c, rng);
  p.for_each([](const std::string& name, Array& a) {
    if (name != "value_embed") a.fill(0.0);
  });
  p.value_embed = random_array(p.value_embed.shape(), rng, -1, 1);
  return p;
}

TEST(Forward, ZeroNetworkIsNaiveForecast) {
  const ForecasterConfig c = toy_config();
  Rng rng(5);
  const ForecasterParams p = zero_except_value_embed(c, rng);
  const Array x = random_array({3, 2, 16}, rng, -10, 10);
  const Array y = predict(p, c, x);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t ch = 0; ch < 2; ++ch)
      for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(y.at({b, ch, s}), x.at({b, ch, 15}));
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// Straight-line composition of the documented pipeline for B = 1.
Array reference_forward(const ForecasterParams& p, const ForecasterConfig& c, const Array& x) {
  const std::size_t C = c.channels, L = c.lookback, Hz = c.horizon, T = L + Hz, d = c.hidden();
  const std::size_t dc = c.d_channel_token, dv = c.d_value_token, hd = c.caps.num_heads * c.caps.head_dim;
  std::vector<std::vector<double>> xe(C, std::vector<double>(T));
  std::vector<double> anchor(C);
  for (std::size_t ch = 0; ch < C; ++ch) {
    anchor[ch] = x[ch * L + L - 1];
    for (std::size_t t = 0; t < L; ++t) xe[ch][t] = x[ch * L + t] - anchor[ch];
    for (std::size_t s = 0; s < Hz; ++s) {
      double acc = 0.0;
      for (std::size_t k = 0; k < L; ++k) acc += xe[ch][k] * p.w_ext[k * Hz + s];
      xe[ch][L + s] = acc;
    }
  }
  auto rms = [&](const Array& h, const Array& g) {
    Array out(h.shape());
    for (std::size_t t = 0; t < T; ++t) {
      double ss = 0.0;
      for (std::size_t j = 0; j < d; ++j) ss += h[t * d + j] * h[t * d + j];
      const double inv = 1.0 / std::sqrt(ss / double(d) + 1e-8);
      for (std::size_t j = 0; j < d; ++j) out[t * d + j] = g[j] * h[t * d + j] * inv;
    }
    return out;
  };
  Array y({1, c.target_channels, Hz});
  for (std::size_t ch = 0; ch < C; ++ch) {
    Array h({T, d});
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < dc; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < C; ++k) acc += p.w_chan[k * dc + j] * xe[k][t];
        h[t * d + j] = acc;
      }
      for (std::size_t j = 0; j < dv; ++j) h[t * d + dc + j] = xe[ch][t] * p.value_embed[ch * dv + j];
    }
    for (const auto& l : p.layers) {
      const auto att = testing::oracle_attention(rms(h, l.norm_attn), l.kernel, c.caps);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
          double acc = 0.0;
          for (std::size_t a = 0; a < hd; ++a) {
            acc += att.out[t][a / c.caps.head_dim][a % c.caps.head_dim] * l.w_o[a * d + j];
          }
          h[t * d + j] += acc;
        }
      }
      const Array f = rms(h, l.norm_ffn);
      const std::size_t e = l.ffn_in.dim(1);
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> mid(e);
        for (std::size_t m = 0; m < e; ++m) {
          double acc = 0.0;
          for (std::size_t j = 0; j < d; ++j) acc += f[t * d + j] * l.ffn_in[j * e + m];
          mid[m] = gelu_ref(acc);
        }
        for (std::size_t j = 0; j < d; ++j) {
          double acc = 0.0;
          for (std::size_t m = 0; m < e; ++m) acc += mid[m] * l.ffn_out[m * d + j];
          h[t * d + j] += acc;
        }
      }
    }
    const auto targets = c.target_indices();
    for (std::size_t k = 0; k < targets.size(); ++k) {
      if (targets[k] != ch) continue;
      for (std::size_t s = 0; s < Hz; ++s) {
        double acc = 0.0;
        for (std::size_t j = 0; j < dv; ++j) acc += h[(L + s) * d + dc + j] * p.value_embed[ch * dv + j];
        y[k * Hz + s] = acc + anchor[ch];
      }
    }
  }
  return y;
}

TEST(Forward, MatchesStraightLineComposition) {
  for (PhiMode phi : {PhiMode::kIdentity, PhiMode::kSoftmax}) {
    ForecasterConfig c;
    c.lookback = 4;
    c.horizon = 2;
    c.channels = 1;
    c.target_channels = 1;
    c.num_layers = 2;
    c.caps.num_heads = 2;
    c.caps.head_dim = 2;
    c.caps.phi_mode = phi;
    c.d_channel_token = c.d_value_token = 2;
    c.ffn_expansion = 2;
    c.init_std = 0.5;
    Rng rng(21);
    const ForecasterParams p = init_params(c, rng);
    const Array x = random_array({1, 1, 4}, rng, -3, 3);
    EXPECT_LT(max_abs_diff(predict(p, c, x), reference_forward(p, c, x)), 1e-12) << to_string(phi);
  }
  ForecasterConfig c = toy_config();
  c.init_std = 0.3;
  c.targets = {1};
  c.target_channels = 1;
  Rng rng(22);
  const ForecasterParams p = init_params(c, rng);
  const Array x = random_array({1, 2, 16}, rng, -3, 3);
  EXPECT_LT(max_abs_diff(predict(p, c, x), reference_forward(p, c, x)), 1e-12);
}

TEST(Forward, EvalModeIgnoresRng) {
  ForecasterConfig c = toy_config();
  c.channel_dropout = true;
  Rng rng(8);
  const ForecasterParams p = init_params(c, rng);
  const Array x = random_array({2, 2, 16}, rng);
  Tape t1, t2;
  std::vector<Rng> r1{Rng(1), Rng(2)}, r2{Rng(3), Rng(4)};
  EXPECT_EQ(forward(t1, bind(t1, p, false), c, x, Mode::kEval, r1).value(),
            forward(t2, bind(t2, p, false), c, x, Mode::kEval, r2).value());
  Tape t3;
  const Array trained = forward(t3, bind(t3, p, false), c, x, Mode::kTrain, r1).value();
  EXPECT_TRUE(trained.all_finite());
}

TEST(Forward, RejectsBadInputShape) {
  const ForecasterConfig c = toy_config();
  Rng rng(1);
  EXPECT_THROW(predict(init_params(c, rng), c, Array({1, 3, 16})), ConfigError);
}

TEST(Forward, NonFiniteActivationNamesLayer) {
  ForecasterConfig c = toy_config();
  c.num_layers = 2;
  c.init_std = 0.3;
  Rng rng(2);
  ForecasterParams p = init_params(c, rng);
  p.layers[1].ffn_in.fill(1e300);
  p.layers[1].ffn_out.fill(1e300);
  try {
    predict(p, c, random_array({1, 2, 16}, rng, 1, 2));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos) << e.what();
  }
}

TEST(ForwardProperty, ShiftEquivariance) {
  ForecasterConfig c = toy_config();
  c.init_std = 0.3;
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const ForecasterParams p = init_params(c, rng);
    const Array x = random_array({2, 2, 16}, rng, -2, 2);
    Array xs = x;
    for (double& v : xs.data()) v += 7.3;
    const Array y = predict(p, c, x), ys = predict(p, c, xs);
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(ys[i] - y[i], 7.3, 1e-12);
  }
}

TEST(ForwardProperty, ChannelIndependentWithoutChannelTokens) {
  ForecasterConfig c = toy_config();
  c.init_std = 0.3;
  Rng rng(32);
  ForecasterParams p = init_params(c, rng);
  p.w_chan.fill(0.0);
  const Array x = random_array({1, 2, 16}, rng);
  Array x2 = x;
  for (std::size_t t = 16; t < 32; ++t) x2[t] += rng.uniform(-5, 5);
  const Array y = predict(p, c, x), y2 = predict(p, c, x2);
  for (std::size_t s = 0; s < 4; ++s) EXPECT_NEAR(y[s], y2[s], 1e-12);
  EXPECT_GT(std::abs(y[4] - y2[4]) + std::abs(y[7] - y2[7]), 1e-9);
}

TEST(ForwardProperty, EndToEndGradientCheck) {
  ForecasterConfig c = toy_config();
  c.init_std = 0.3;
  Rng rng(2026);
  const ForecasterParams p0 = init_params(c, rng);
  ASSERT_LE(param_count(c), 500u);
  const Array x = random_array({2, 2, 16}, rng, -2, 2);
  const Array truth = random_array({2, 2, 4}, rng, -2, 2);
  std::vector<Array> flat;
  p0.for_each([&](const std::string&, const Array& a) { flat.push_back(a); });
  auto f = [&](Tape& tape, const std::vector<Var>& v) {
    std::size_t i = 0;
    const ForecasterSlots<Var> slots = p0.transform<Var>([&](const std::string&, const Array&) { return v[i++]; });
    const Var diff = forward(tape, slots, c, x, Mode::kEval) - tape.constant(truth);
    return mean(square(diff));
  };
  const auto res = grad_check(f, flat, 1e-5, 100, rng);
  EXPECT_LT(res.max_rel_error, 1e-4) << "tape=" << res.worst_tape << " fd=" << res.worst_fd;
}

// --- checkpoint ----------------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  ForecasterConfig c = toy_config();
  c.caps.score_scale = 0.3;
  c.caps.paths.clock = false;
  c.targets = {1};
  c.target_channels = 1;
  Rng rng(40);
  const ForecasterParams p = init_params(c, rng);
  const auto path = (std::filesystem::temp_directory_path() / "caps_ckpt_test.bin").string();
  save_checkpoint(path, c, p);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(to_json(ck.config), to_json(c));
  p.for_each([&](const std::string& name, const Array& a) {
    bool found = false;
    ck.params.for_each([&](const std::string& n2, const Array& b) {
      if (n2 == name) {
        found = true;
        EXPECT_EQ(a, b) << name;
      }
    });
    EXPECT_TRUE(found) << name;
  });
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsForeignFile) {
  const auto path = (std::filesystem::temp_directory_path() / "caps_not_ckpt.bin").string();
  {
    std::ofstream os(path);
    os << "hello world, not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path), ConfigError);
  EXPECT_THROW(load_checkpoint(path + ".missing"), ConfigError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace caps
