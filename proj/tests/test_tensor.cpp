#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "canm/metrics.hpp"
#include "canm/tensor.hpp"
#include "canm/tensor_io.hpp"

using namespace canm;

namespace {

Tensor rand_t(std::vector<size_t> shape, unsigned seed) {
  std::mt19937_64 gen(seed);
  return Tensor::uniform(std::move(shape), gen, -1.0, 1.0);
}

}  // namespace

TEST_CASE("matmul: identity and hand-computed products") {
  Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
  CHECK(max_abs_diff(matmul(a, eye), a) == 0.0);

  Tensor b = Tensor::from_vector({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == std::vector<size_t>{2, 1});
  CHECK(c.data()[0] == doctest::Approx(3.0));
  CHECK(c.data()[1] == doctest::Approx(7.0));
}

TEST_CASE("matmul: shape error names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), ShapeError);
}

TEST_CASE("matmul: gradients vs central finite differences") {
  auto fn = [](std::vector<Tensor>& in) { return sum_all(matmul(in[0], in[1])); };
  auto rep = gradcheck(fn, {rand_t({5, 4}, 1), rand_t({4, 3}, 2)});
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("matmul: batched with broadcast batch dims") {
  Tensor a = rand_t({3, 2, 4, 5}, 3);
  Tensor b = rand_t({1, 2, 5, 6}, 4);
  Tensor c = matmul(a, b);
  CHECK(c.shape() == std::vector<size_t>{3, 2, 4, 6});
  // Against per-slice 2-d matmuls.
  for (size_t i = 0; i < 3; ++i)
    for (size_t j = 0; j < 2; ++j) {
      Tensor as = reshape(slice(slice(a, 0, i, 1), 1, j, 1), {4, 5});
      Tensor bs = reshape(slice(b, 1, j, 1), {5, 6});
      Tensor cs = reshape(slice(slice(c, 0, i, 1), 1, j, 1), {4, 6});
      CHECK(max_abs_diff(matmul(as, bs), cs) < 1e-14);
    }
  auto fn = [](std::vector<Tensor>& in) { return sum_all(mul(matmul(in[0], in[1]), in[2])); };
  auto rep = gradcheck(fn, {rand_t({2, 3, 4}, 5), rand_t({4, 2}, 6), rand_t({2, 3, 2}, 7)});
  CHECK(rep.pass);
}

TEST_CASE("softmax: uniform, analytic, stability") {
  Tensor u = softmax(Tensor::from_vector({3}, {0, 0, 0}), 0);
  for (size_t i = 0; i < 3; ++i) CHECK(u.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  Tensor v = softmax(Tensor::from_vector({2}, {0.0, std::log(2.0)}), 0);
  CHECK(v.data()[0] == doctest::Approx(1.0 / 3).epsilon(1e-12));
  CHECK(v.data()[1] == doctest::Approx(2.0 / 3).epsilon(1e-12));

  Tensor w = softmax(Tensor::from_vector({2}, {1000.0, 1000.0}), 0);
  CHECK(w.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(w.data()[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax: rows sum to 1 within 1e-12 across shapes") {
  for (unsigned seed : {11u, 12u, 13u}) {
    Tensor x = rand_t({4, 7, 5}, seed);
    for (size_t axis : {0u, 1u, 2u}) {
      Tensor y = softmax(x, axis);
      Tensor s = sum_axes(y, {axis}, false);
      for (size_t i = 0; i < s.numel(); ++i) CHECK(std::abs(s.data()[i] - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("softmax: gradient") {
  auto fn = [](std::vector<Tensor>& in) { return sum_all(mul(softmax(in[0], 1), in[1])); };
  auto rep = gradcheck(fn, {rand_t({3, 6}, 21), rand_t({3, 6}, 22)});
  CHECK(rep.pass);
}

TEST_CASE("conv2d: delta kernel is the identity map") {
  Tensor x = rand_t({1, 1, 6, 6}, 31);
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;  // center of 3x3
  Tensor w = Tensor::from_vector({1, 1, 3, 3}, k);
  Tensor y = conv2d<double>(x, w, nullptr, 1, 1, 1);
  CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("conv2d: constant image through 1x1 kernel") {
  Tensor x = Tensor::full({1, 1, 4, 4}, 3.0);
  Tensor w = Tensor::full({1, 1, 1, 1}, 2.5);
  Tensor y = conv2d<double>(x, w, nullptr, 1, 0, 1);
  for (size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(7.5));
}

TEST_CASE("conv2d: depthwise gradient vs finite differences") {
  auto fn = [](std::vector<Tensor>& in) {
    return sum_all(conv2d(in[0], in[1], in[2], 1, 1, 4));
  };
  auto rep = gradcheck(fn, {rand_t({1, 4, 8, 8}, 41), rand_t({4, 1, 3, 3}, 42),
                            rand_t({4}, 43)});
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("conv2d: strided and grouped gradients") {
  auto fn = [](std::vector<Tensor>& in) {
    return sum_all(conv2d(in[0], in[1], in[2], 2, 1, 2));
  };
  auto rep = gradcheck(fn, {rand_t({2, 4, 6, 6}, 44), rand_t({6, 2, 3, 3}, 45), rand_t({6}, 46)});
  CHECK(rep.pass);
}

TEST_CASE("conv2d: channel/group mismatch raises shape error") {
  Tensor x = Tensor::zeros({1, 4, 8, 8});
  Tensor w = Tensor::zeros({4, 4, 3, 3});  // wrong: expects C/groups = 2
  CHECK_THROWS_AS(conv2d<double>(x, w, nullptr, 1, 1, 2), ShapeError);
  CHECK_THROWS_AS(conv2d<double>(x, w, nullptr, 1, 1, 3), ShapeError);
}

TEST_CASE("elementwise: identities") {
  Tensor x = rand_t({3, 4}, 51);
  CHECK(max_abs_diff(add(x, Tensor::zeros({3, 4})), x) == 0.0);
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
}

TEST_CASE("elementwise: broadcast multiply with per-channel gamma") {
  Tensor x = rand_t({4, 5, 6}, 52);  // (C,H,W)
  Tensor g = rand_t({4, 1, 1}, 53);
  Tensor y = mul(x, g);
  CHECK(y.shape() == x.shape());
  for (size_t c = 0; c < 4; ++c)
    CHECK(y.data()[c * 30 + 7] == doctest::Approx(x.data()[c * 30 + 7] * g.data()[c]));
  auto fn = [](std::vector<Tensor>& in) { return sum_all(mul(in[0], in[1])); };
  auto rep = gradcheck(fn, {rand_t({4, 5, 6}, 54), rand_t({4, 1, 1}, 55)});
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("elementwise: gradient sweep over ops and shapes") {
  std::vector<std::vector<size_t>> shapes = {{7}, {3, 4}, {2, 3, 2}};
  for (unsigned s = 0; s < shapes.size(); ++s) {
    auto sh = shapes[s];
    auto rep = gradcheck(
        [](std::vector<Tensor>& in) {
          Tensor a = in[0], b = in[1];
          Tensor y = add(mul(gelu(a), relu(b)), divt(a, add_const(abs_t(b), 2.0)));
          y = add(y, sqrt_t(add_const(mul(a, a), 1.0)));
          y = add(y, pow_t(add_const(abs_t(a), 1.0), 1.7));
          y = add(y, clamp_min(b, 0.25));
          return sum_all(y);
        },
        {rand_t(sh, 61 + s), rand_t(sh, 71 + s)});
    CHECK(rep.pass);
  }
}

TEST_CASE("elementwise: division by exact zero fails in verify mode") {
  Tensor a = Tensor::ones({2});
  Tensor z = Tensor::zeros({2});
  CHECK_THROWS_AS(divt(a, z), ValueError);
}

TEST_CASE("verify mode flags non-finite results") {
  Tensor big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(mul(big, big), ValueError);
}

TEST_CASE("resample: constants survive every mode") {
  Tensor x = Tensor::full({1, 4, 8, 8}, 0.7);
  Tensor d2 = avgpool2d(x, 2);
  Tensor d4 = avgpool2d(x, 4);
  Tensor up = pixel_shuffle2(x);
  for (size_t i = 0; i < d2.numel(); ++i) CHECK(d2.data()[i] == doctest::Approx(0.7));
  for (size_t i = 0; i < d4.numel(); ++i) CHECK(d4.data()[i] == doctest::Approx(0.7));
  for (size_t i = 0; i < up.numel(); ++i) CHECK(up.data()[i] == doctest::Approx(0.7));
  CHECK(up.shape() == std::vector<size_t>{1, 1, 16, 16});
}

TEST_CASE("resample: avgpool of [[1,2],[3,4]] is [[2.5]]") {
  Tensor x = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = avgpool2d(x, 2);
  CHECK(y.numel() == 1);
  CHECK(y.item() == doctest::Approx(2.5));
}

TEST_CASE("resample: pixel shuffle then avgpool preserves the channel mean") {
  Tensor x = rand_t({1, 4, 8, 8}, 81);
  Tensor y = avgpool2d(pixel_shuffle2(x), 2);
  // Direct-loop oracle: mean over the 4 channels at each position.
  for (size_t p = 0; p < 64; ++p) {
    double m = 0;
    for (size_t c = 0; c < 4; ++c) m += x.data()[c * 64 + p];
    m /= 4.0;
    CHECK(std::abs(y.data()[p] - m) < 1e-14);
  }
}

TEST_CASE("resample: indivisible dimensions raise shape errors") {
  CHECK_THROWS_AS(avgpool2d(Tensor::zeros({1, 1, 6, 6}), 4), ShapeError);
  CHECK_THROWS_AS(pixel_shuffle2(Tensor::zeros({1, 3, 4, 4})), ShapeError);
}

TEST_CASE("resample: gradients") {
  auto rep = gradcheck(
      [](std::vector<Tensor>& in) {
        return sum_all(mul(avgpool2d(in[0], 2), avgpool2d(avgpool2d(in[0], 4), 1)));
      },
      {rand_t({1, 2, 4, 4}, 82)});
  CHECK(rep.pass);
  rep = gradcheck([](std::vector<Tensor>& in) { return sum_all(mul(pixel_shuffle2(in[0]), pixel_shuffle2(in[0]))); },
                  {rand_t({1, 4, 3, 3}, 83)});
  CHECK(rep.pass);
}

TEST_CASE("backward: sum gives ones, quadratic gives 2x") {
  Tensor x = rand_t({3, 3}, 91).set_requires_grad(true);
  autodiff::GraphT<double>::tls().clear();
  sum_all(x).backward();
  for (size_t i = 0; i < 9; ++i) CHECK(x.grad()[i] == 1.0);
  x.zero_grad();
  autodiff::GraphT<double>::tls().clear();
  sum_all(mul(x, x)).backward();
  for (size_t i = 0; i < 9; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-14));
  autodiff::GraphT<double>::tls().clear();
}

TEST_CASE("backward: two-layer conv+gelu stack vs finite differences") {
  auto fn = [](std::vector<Tensor>& in) {
    Tensor h = gelu(conv2d(in[0], in[1], in[2], 1, 1, 1));
    Tensor y = conv2d(h, in[3], in[4], 1, 1, 1);
    return mean_all(mul(y, y));
  };
  auto rep = gradcheck(fn, {rand_t({1, 2, 5, 5}, 92), rand_t({3, 2, 3, 3}, 93), rand_t({3}, 94),
                            rand_t({2, 3, 3, 3}, 95), rand_t({2}, 96)});
  CHECK(rep.pass);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("backward: errors on non-scalar and untracked tensors") {
  Tensor x = rand_t({2, 2}, 97);
  CHECK_THROWS_AS(x.backward(), UsageError);  // untracked
  x.set_requires_grad(true);
  CHECK_THROWS_AS(x.backward(), UsageError);  // non-scalar
}

TEST_CASE("backward: fan-out accumulates and repeat is bitwise identical") {
  Tensor x = rand_t({4, 4}, 98).set_requires_grad(true);
  autodiff::GraphT<double>::tls().clear();
  Tensor a = mul(x, x);
  Tensor loss = add(sum_all(a), sum_all(mul(a, x)));  // x used in several paths
  loss.backward();
  std::vector<double> first = x.grad();
  x.zero_grad();
  loss.backward();
  std::vector<double> second = x.grad();
  CHECK(first == second);  // bitwise
  autodiff::GraphT<double>::tls().clear();
}

TEST_CASE("movement ops: roundtrips and gradients") {
  Tensor x = rand_t({2, 3, 4, 5}, 101);
  Tensor p = permute(x, {2, 0, 3, 1});
  Tensor back = permute(p, {1, 3, 0, 2});
  CHECK(max_abs_diff(back, x) == 0.0);

  Tensor r = roll2d(x, 3, -2);
  Tensor r2 = roll2d(r, -3, 2);
  CHECK(max_abs_diff(r2, x) == 0.0);

  Tensor padded = pad_axis(pad_axis(x, 2, 1, 2), 3, 2, 1);
  Tensor sl = slice(slice(padded, 2, 1, 4), 3, 2, 5);
  CHECK(max_abs_diff(sl, x) == 0.0);

  auto rep = gradcheck(
      [](std::vector<Tensor>& in) {
        Tensor y = permute(in[0], {1, 0, 2});
        y = reshape(y, {3, 2, 2, 2});
        y = roll2d(y, 1, 1);
        y = pad_axis(y, 2, 1, 0);
        y = slice(y, 2, 0, 2);
        Tensor z = concat({y, y}, 1);
        return sum_all(mul(z, z));
      },
      {rand_t({2, 3, 4}, 102)});
  CHECK(rep.pass);
}

TEST_CASE("unfold/fold: centered patches and normalized roundtrip") {
  // 1x1x3x3, 3x3 patches: 9 patches, the center one is the whole map.
  Tensor x = Tensor::from_vector({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor p = unfold(x, 3, 3);
  CHECK(p.shape() == std::vector<size_t>{1, 9, 9});
  for (size_t i = 0; i < 9; ++i) CHECK(p.data()[4 * 9 + i] == doctest::Approx(double(i + 1)));
  // Corner patch (0,0) of a ramp: top row and left column are zero padding.
  CHECK(p.data()[0 * 9 + 0] == 0.0);
  CHECK(p.data()[0 * 9 + 1] == 0.0);
  CHECK(p.data()[0 * 9 + 2] == 0.0);
  CHECK(p.data()[0 * 9 + 3] == 0.0);
  CHECK(p.data()[0 * 9 + 4] == 1.0);  // center = pixel (0,0)

  Tensor folded = fold(p, 1, 3, 3, 3, 3);
  CHECK(max_abs_diff(folded, x) < 1e-12);

  Tensor y = rand_t({2, 3, 6, 7}, 111);
  CHECK(max_abs_diff(fold(unfold(y, 3, 3), 3, 6, 7, 3, 3), y) < 1e-12);

  auto rep = gradcheck(
      [](std::vector<Tensor>& in) {
        Tensor pt = unfold(in[0], 3, 3);
        Tensor f = fold(mul(pt, pt), 2, 4, 4, 3, 3);
        return sum_all(mul(f, f));
      },
      {rand_t({1, 2, 4, 4}, 112)});
  CHECK(rep.pass);
}

TEST_CASE("reductions: axis sums with and without keepdim") {
  Tensor x = rand_t({2, 3, 4}, 121);
  Tensor s = sum_axes(x, {1}, true);
  CHECK(s.shape() == std::vector<size_t>{2, 1, 4});
  Tensor s2 = sum_axes(x, {0, 2}, false);
  CHECK(s2.shape() == std::vector<size_t>{3});
  double manual = 0;
  for (size_t b = 0; b < 2; ++b)
    for (size_t k = 0; k < 4; ++k) manual += x.data()[b * 12 + 1 * 4 + k];
  CHECK(s2.data()[1] == doctest::Approx(manual).epsilon(1e-14));
  auto rep = gradcheck(
      [](std::vector<Tensor>& in) {
        return sum_all(mul(sum_axes(in[0], {1}, true), mean_axes(in[0], {0}, true)));
      },
      {rand_t({2, 3, 4}, 122)});
  CHECK(rep.pass);
}

TEST_CASE("single-precision fast path tracks double within 1e-3") {
  std::mt19937_64 gen(7);
  TensorF af = TensorF::uniform({4, 5}, gen, -1.0f, 1.0f);
  TensorF bf = TensorF::uniform({5, 3}, gen, -1.0f, 1.0f);
  Tensor ad = cast_tensor<float, double>(af);
  Tensor bd = cast_tensor<float, double>(bf);

  TensorF cf = matmul(af, bf);
  Tensor cd = matmul(ad, bd);
  for (size_t i = 0; i < cf.numel(); ++i)
    CHECK(std::abs(cf.data()[i] - cd.data()[i]) < 1e-3 * std::max(1.0, std::abs(cd.data()[i])));

  // Backward in single precision agrees with double at the loose tolerance.
  af.set_requires_grad(true);
  autodiff::GraphT<float>::tls().clear();
  sum_all(gelu(matmul(af, bf))).backward();
  ad.set_requires_grad(true);
  autodiff::GraphT<double>::tls().clear();
  sum_all(gelu(matmul(ad, bd))).backward();
  for (size_t i = 0; i < ad.numel(); ++i)
    CHECK(std::abs(af.grad()[i] - ad.grad()[i]) < 1e-3 * std::max(1.0, std::abs(ad.grad()[i])));
  autodiff::GraphT<float>::tls().clear();
  autodiff::GraphT<double>::tls().clear();
}

TEST_CASE("binary tensor format roundtrips both dtypes") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "canm_tio_test";
  fs::create_directories(dir);
  Tensor x = rand_t({2, 3, 4}, 131);

  std::string p64 = (dir / "x64.canmt").string();
  write_tensor(p64, x, DType::f64);
  DType dt;
  Tensor y = read_tensor(p64, &dt);
  CHECK(dt == DType::f64);
  CHECK(max_abs_diff(x, y) == 0.0);

  std::string p32 = (dir / "x32.canmt").string();
  write_tensor(p32, x, DType::f32);
  Tensor z = read_tensor(p32, &dt);
  CHECK(dt == DType::f32);
  CHECK(max_abs_diff(x, z) < 1e-6);

  // Corrupt inputs fail cleanly.
  std::string bad = (dir / "bad.canmt").string();
  {
    std::FILE* f = std::fopen(bad.c_str(), "wb");
    std::fputs("JUNK", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(read_tensor(bad), IoError);
  std::string trunc = (dir / "trunc.canmt").string();
  fs::copy_file(p64, trunc, fs::copy_options::overwrite_existing);
  fs::resize_file(trunc, fs::file_size(trunc) - 8);
  CHECK_THROWS_AS(read_tensor(trunc), IoError);
  fs::remove_all(dir);
}
