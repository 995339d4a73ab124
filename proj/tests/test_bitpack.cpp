#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "qlr/bitpack.hpp"

using namespace qlr;

namespace {

constexpr int kAllBits[] = {2, 3, 4, 8};

// Independent oracle: assemble the LSB-first bit stream one bit at a time.
std::vector<uint32_t> bitstring_words(const std::vector<int>& vals, int bits) {
  std::vector<int> stream;
  for (int v : vals)
    for (int b = 0; b < bits; ++b) stream.push_back((v >> b) & 1);
  std::vector<uint32_t> words((stream.size() + 31) / 32, 0);
  for (size_t i = 0; i < stream.size(); ++i)
    if (stream[i]) words[i / 32] |= 1u << (i % 32);
  return words;
}

std::vector<int> random_values(Rng& rng, int out, int in, int bits) {
  std::vector<int> v(static_cast<size_t>(out) * in);
  for (auto& x : v) x = static_cast<int>(rng.randint(0, (1 << bits) - 1));
  return v;
}

QuantParams random_qparams(Rng& rng, int out, int in, int bits, int group_size) {
  QuantParams qp;
  qp.group_size = group_size;
  const int ng = qp.n_groups(in);
  qp.scales.resize(static_cast<size_t>(out) * ng);
  qp.zeros.resize(qp.scales.size());
  for (auto& s : qp.scales) s = static_cast<float>(rng.uniform() * 1.5 + 0.05);
  for (auto& z : qp.zeros) z = static_cast<uint32_t>(rng.randint(0, (1 << bits) - 1));
  return qp;
}

// Oracle dequantization: reconstruct stored order from the logical unpack,
// then apply the documented group rule directly.
std::vector<float> oracle_dequant(const PackedMatrix& pm, const QuantParams& qp) {
  const int out = pm.out_features, in = pm.in_features;
  const int gs = qp.effective_group(in);
  const int ng = qp.n_groups(in);
  const std::vector<int> logical = unpack(pm);
  std::vector<float> w(logical.size());
  for (int r = 0; r < out; ++r)
    for (int j = 0; j < in; ++j) {
      const int lc = pm.perm.empty() ? j : pm.perm[j];
      const int q = logical[static_cast<size_t>(r) * in + lc];
      const float s = qp.scales[static_cast<size_t>(r) * ng + j / gs];
      const float z = static_cast<float>(qp.zeros[static_cast<size_t>(r) * ng + j / gs]);
      w[static_cast<size_t>(r) * in + lc] = (static_cast<float>(q) - z) * s;
    }
  return w;
}

std::vector<int> random_perm(Rng& rng, int n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  rng.shuffle(p);
  return p;
}

}  // namespace

TEST_CASE("pack bit layout matches hand example b=2") {
  // row [1,2,3,0]: bits 01 10 11 00 LSB-first -> low byte 0b00111001 = 57
  std::vector<int> vals = {1, 2, 3, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
  PackedMatrix pm = pack(vals, 1, 16, 2);
  CHECK((pm.words[0] & 0xFF) == 57u);
  CHECK(pm.words.size() == 1);
}

TEST_CASE("pack b=3 spanning values match bit-string oracle") {
  std::vector<int> vals(11, 7);
  PackedMatrix pm = pack(vals, 1, 11, 3);
  auto expect = bitstring_words(vals, 3);
  REQUIRE(pm.words.size() == expect.size());
  CHECK(pm.words == expect);
  // 33 set bits frozen from the oracle
  CHECK(pm.words[0] == 0xFFFFFFFFu);
  CHECK(pm.words[1] == 0x00000001u);
}

TEST_CASE("pack of all-zero matrix is all-zero words") {
  for (int bits : kAllBits) {
    std::vector<int> vals(35, 0);
    PackedMatrix pm = pack(vals, 5, 7, bits);
    for (uint32_t w : pm.words) CHECK(w == 0u);
  }
}

TEST_CASE("pack rejects out-of-range values with coordinates") {
  std::vector<int> vals(6, 0);
  vals[4] = 4;  // row 1, col 1 for a 2x3 matrix
  try {
    pack(vals, 2, 3, 2);
    FAIL("expected exception");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 1") != std::string::npos);
    CHECK(msg.find("col 1") != std::string::npos);
  }
}

TEST_CASE("pack matches bit-string oracle on random matrices") {
  Rng rng(101);
  for (int bits : kAllBits)
    for (int trial = 0; trial < 50; ++trial) {
      const int out = static_cast<int>(rng.randint(1, 6));
      const int in = static_cast<int>(rng.randint(1, 20));
      auto vals = random_values(rng, out, in, bits);
      CHECK(pack(vals, out, in, bits).words == bitstring_words(vals, bits));
    }
}

TEST_CASE("round trip over 1000 random shapes, every bit width") {
  Rng rng(103);
  for (int trial = 0; trial < 1000; ++trial) {
    int out, in;
    if (trial == 0) {
      out = 1, in = 1;
    } else if (trial == 1) {
      out = 1, in = 33;
    } else {
      out = static_cast<int>(rng.randint(1, 12));
      in = static_cast<int>(rng.randint(1, 48));
    }
    for (int bits : kAllBits) {
      auto vals = random_values(rng, out, in, bits);
      PackedMatrix pm = pack(vals, out, in, bits);
      REQUIRE(unpack(pm) == vals);
    }
  }
}

TEST_CASE("unpack restores logical column order through perm") {
  // stored col 0 holds logical col 1 and vice versa
  PackedMatrix pm = pack({3, 1, 0, 2}, 2, 2, 2, {1, 0});
  std::vector<int> expect = {1, 3, 2, 0};
  CHECK(unpack(pm) == expect);
}

TEST_CASE("b=8 values equal the byte dump of the words") {
  Rng rng(107);
  auto vals = random_values(rng, 3, 8, 8);
  PackedMatrix pm = pack(vals, 3, 8, 8);
  const auto* bytes = reinterpret_cast<const unsigned char*>(pm.words.data());
  for (size_t i = 0; i < vals.size(); ++i) CHECK(static_cast<int>(bytes[i]) == vals[i]);
}

TEST_CASE("unpack_transposed equals transpose of unpack") {
  Rng rng(109);
  SECTION("1x1") {
    PackedMatrix pm = pack({2}, 1, 1, 2);
    CHECK(unpack_transposed(pm) == std::vector<int>{2});
  }
  SECTION("b=3 4x5 with perm") {
    auto vals = random_values(rng, 4, 5, 3);
    PackedMatrix pm = pack(vals, 4, 5, 3, random_perm(rng, 5));
    auto logical = unpack(pm);
    auto t = unpack_transposed(pm);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 5; ++c) REQUIRE(t[c * 4 + r] == logical[r * 5 + c]);
  }
  SECTION("random shapes, all bit widths") {
    for (int bits : kAllBits)
      for (int trial = 0; trial < 100; ++trial) {
        const int out = static_cast<int>(rng.randint(1, 9));
        const int in = static_cast<int>(rng.randint(1, 33));
        auto vals = random_values(rng, out, in, bits);
        auto perm = trial % 2 ? random_perm(rng, in) : std::vector<int>{};
        PackedMatrix pm = pack(vals, out, in, bits, perm);
        auto logical = unpack(pm);
        auto t = unpack_transposed(pm);
        for (int r = 0; r < out; ++r)
          for (int c = 0; c < in; ++c) REQUIRE(t[c * out + r] == logical[r * in + c]);
      }
  }
}

TEST_CASE("validate flags corrupted word counts") {
  PackedMatrix pm = pack({1, 2, 3, 0}, 2, 2, 2);
  pm.words.push_back(0);
  CHECK_THROWS_WITH(pm.validate(), Catch::Matchers::ContainsSubstring("corrupted"));
}

TEST_CASE("fused forward with q == zeros yields pure bias") {
  Rng rng(113);
  const int out = 4, in = 8, m = 3;
  QuantParams qp = random_qparams(rng, out, in, 4, 4);
  std::vector<int> vals(out * in);
  const int ng = qp.n_groups(in);
  for (int r = 0; r < out; ++r)
    for (int j = 0; j < in; ++j)
      vals[r * in + j] = static_cast<int>(qp.zeros[r * ng + j / 4]);
  PackedMatrix pm = pack(vals, out, in, 4);
  std::vector<float> x(m * in), bias(out), y(m * out);
  for (auto& v : x) v = static_cast<float>(rng.normal());
  for (auto& v : bias) v = static_cast<float>(rng.normal());
  fused_forward_raw(x.data(), m, pm, qp, bias.data(), y.data());
  for (int i = 0; i < m; ++i)
    for (int r = 0; r < out; ++r) CHECK(y[i * out + r] == bias[r]);
}

TEST_CASE("fused forward identity pattern passes input through") {
  const int n = 5;
  QuantParams qp;
  qp.group_size = QuantParams::kPerRow;
  qp.scales.assign(n, 1.0f);
  qp.zeros.assign(n, 0);
  std::vector<int> vals(n * n, 0);
  for (int i = 0; i < n; ++i) vals[i * n + i] = 1;
  PackedMatrix pm = pack(vals, n, n, 2);
  Rng rng(127);
  std::vector<float> x(2 * n), y(2 * n);
  for (auto& v : x) v = static_cast<float>(rng.normal());
  fused_forward_raw<float>(x.data(), 2, pm, qp, nullptr, y.data());
  for (int i = 0; i < 2 * n; ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("fused forward and backward match naive paths, 200 instances per b") {
  Rng rng(131);
  for (int bits : kAllBits) {
    for (int trial = 0; trial < 200; ++trial) {
      const int out = static_cast<int>(rng.randint(1, 7));
      const int in = static_cast<int>(rng.randint(1, 24));
      const int m = static_cast<int>(rng.randint(1, 5));
      int gs = QuantParams::kPerRow;
      if (trial % 3 != 0) gs = static_cast<int>(rng.randint(1, in));
      auto vals = random_values(rng, out, in, bits);
      auto perm = trial % 2 ? random_perm(rng, in) : std::vector<int>{};
      PackedMatrix pm = pack(vals, out, in, bits, perm);
      QuantParams qp = random_qparams(rng, out, in, bits, gs);
      auto w = oracle_dequant(pm, qp);

      std::vector<float> x(static_cast<size_t>(m) * in);
      for (auto& v : x) v = static_cast<float>(rng.normal());
      std::vector<float> y(static_cast<size_t>(m) * out);
      fused_forward_raw<float>(x.data(), m, pm, qp, nullptr, y.data());
      for (int i = 0; i < m; ++i)
        for (int r = 0; r < out; ++r) {
          double ref = 0;
          for (int c = 0; c < in; ++c) ref += static_cast<double>(x[i * in + c]) * w[r * in + c];
          REQUIRE(std::fabs(y[i * out + r] - ref) <= 1e-5 * (1.0 + std::fabs(ref)));
        }

      std::vector<float> gy(static_cast<size_t>(m) * out);
      for (auto& v : gy) v = static_cast<float>(rng.normal());
      std::vector<float> gx(static_cast<size_t>(m) * in, 0.0f);
      fused_backward_input_raw(gy.data(), m, pm, qp, gx.data());
      for (int i = 0; i < m; ++i)
        for (int c = 0; c < in; ++c) {
          double ref = 0;
          for (int r = 0; r < out; ++r) ref += static_cast<double>(gy[i * out + r]) * w[r * in + c];
          REQUIRE(std::fabs(gx[i * in + c] - ref) <= 1e-5 * (1.0 + std::fabs(ref)));
        }
    }
  }
}

TEST_CASE("fused backward of zero grad is zero, identity passes through") {
  const int n = 4;
  QuantParams qp;
  qp.group_size = 2;
  qp.scales.assign(n * 2, 1.0f);
  qp.zeros.assign(n * 2, 0);
  std::vector<int> vals(n * n, 0);
  for (int i = 0; i < n; ++i) vals[i * n + i] = 1;
  PackedMatrix pm = pack(vals, n, n, 2);

  std::vector<float> gy(n, 0.0f), gx(n, 0.0f);
  fused_backward_input_raw(gy.data(), 1, pm, qp, gx.data());
  for (float v : gx) CHECK(v == 0.0f);

  Rng rng(137);
  for (auto& v : gy) v = static_cast<float>(rng.normal());
  std::fill(gx.begin(), gx.end(), 0.0f);
  fused_backward_input_raw(gy.data(), 1, pm, qp, gx.data());
  for (int i = 0; i < n; ++i) CHECK(gx[i] == gy[i]);
}

TEST_CASE("packed_linear shape and group mismatches raise errors") {
  Rng rng(139);
  auto vals = random_values(rng, 3, 6, 4);
  auto pm = std::make_shared<PackedMatrix>(pack(vals, 3, 6, 4));
  auto qp = std::make_shared<QuantParams>(random_qparams(rng, 3, 6, 4, 3));
  Tensor bad({2, 5});
  CHECK_THROWS_WITH(packed_linear(bad, pm, qp), Catch::Matchers::ContainsSubstring("width"));
  auto qp_bad = std::make_shared<QuantParams>(*qp);
  qp_bad->scales.pop_back();
  Tensor ok({2, 6});
  CHECK_THROWS_WITH(packed_linear(ok, pm, qp_bad), Catch::Matchers::ContainsSubstring("scales"));
}

TEST_CASE("packed_linear gradcheck on input and bias, packed storage untouched") {
  Rng rng(149);
  const int out = 5, in = 9, m = 3;
  auto vals = random_values(rng, out, in, 3);
  auto pm = std::make_shared<PackedMatrix>(pack(vals, out, in, 3, random_perm(rng, in)));
  auto qp = std::make_shared<QuantParams>(random_qparams(rng, out, in, 3, 4));
  auto x = qlrtest::random_tensor<float>({m, in}, rng);
  auto bias = qlrtest::random_tensor<float>({out}, rng);
  const auto words_before = pm->words;
  const auto scales_before = qp->scales;
  auto res = qlrtest::gradcheck<float>(
      {x, bias}, [&] { return qlrtest::probe_sum(packed_linear(x, pm, qp, bias), 5); }, 1e-3, rng);
  CHECK(res.max_rel < 1e-3);
  CHECK(pm->words == words_before);
  CHECK(qp->scales == scales_before);
}

TEST_CASE("packed_linear double precision gradcheck") {
  Rng rng(151);
  const int out = 4, in = 6;
  auto vals = random_values(rng, out, in, 2);
  auto pm = std::make_shared<PackedMatrix>(pack(vals, out, in, 2));
  auto qp = std::make_shared<QuantParams>(random_qparams(rng, out, in, 2, QuantParams::kPerRow));
  auto x = qlrtest::random_tensor<double>({2, in}, rng);
  auto res = qlrtest::gradcheck<double>(
      {x}, [&] { return qlrtest::probe_sum(packed_linear<double>(x, pm, qp), 6); }, 1e-6, rng);
  CHECK(res.max_rel < 1e-7);
}
