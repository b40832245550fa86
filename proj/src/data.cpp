#include "canm/data.hpp"

#include <fftw3.h>
#include <png.h>

#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <vector>

#include <json.hpp>

namespace canm {

// ============================================================================
// Normalization
// ============================================================================

std::pair<Tensor, NormalizationRecord> normalize(const Tensor& img) {
  NormalizationRecord rec;
  rec.min = img.data()[0];
  rec.max = img.data()[0];
  for (size_t i = 0; i < img.numel(); ++i) {
    rec.min = std::min(rec.min, img.data()[i]);
    rec.max = std::max(rec.max, img.data()[i]);
  }
  std::vector<double> out(img.numel(), 0.0);
  if (rec.max > rec.min) {
    double inv = 1.0 / (rec.max - rec.min);
    for (size_t i = 0; i < img.numel(); ++i) out[i] = (img.data()[i] - rec.min) * inv;
  }
  return {Tensor::from_vector(img.shape(), std::move(out)), rec};
}

Tensor denormalize(const Tensor& img, const NormalizationRecord& rec) {
  std::vector<double> out(img.numel());
  for (size_t i = 0; i < img.numel(); ++i) out[i] = img.data()[i] * (rec.max - rec.min) + rec.min;
  return Tensor::from_vector(img.shape(), std::move(out));
}

// ============================================================================
// k-space degradation
// ============================================================================

namespace {

std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}

// Unnormalized complex 2-D DFT via FFTW (deterministic FFTW_ESTIMATE plans).
std::vector<std::complex<double>> dft2(const std::vector<std::complex<double>>& in, size_t H,
                                       size_t W, int sign) {
  std::vector<std::complex<double>> out(H * W);
  auto* src = const_cast<fftw_complex*>(reinterpret_cast<const fftw_complex*>(in.data()));
  auto* dst = reinterpret_cast<fftw_complex*>(out.data());
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    plan = fftw_plan_dft_2d(static_cast<int>(H), static_cast<int>(W), src, dst, sign,
                            FFTW_ESTIMATE | FFTW_PRESERVE_INPUT);
  }
  fftw_execute(plan);
  {
    std::lock_guard<std::mutex> lock(fftw_plan_mutex());
    fftw_destroy_plan(plan);
  }
  return out;
}

// Centered (DC at N/2) index <-> frequency helpers.
inline size_t freq_to_index(long f, size_t n) {
  long idx = f % static_cast<long>(n);
  if (idx < 0) idx += static_cast<long>(n);
  return static_cast<size_t>(idx);
}

}  // namespace

DegradeResult kspace_degrade(const Tensor& img, size_t s) {
  if (img.ndim() != 2) throw ShapeError("kspace_degrade: expected [H, W], got " + shape_str(img.shape()));
  if (s != 2 && s != 4) throw UsageError("kspace_degrade: scale must be 2 or 4");
  size_t H = img.size(0), W = img.size(1);
  if (H % s != 0 || W % s != 0)
    throw ShapeError("kspace_degrade: dimensions " + shape_str(img.shape()) +
                     " not divisible by scale " + std::to_string(s));
  size_t Hs = H / s, Ws = W / s;
  if (Hs < 4 || Ws < 4)
    throw ShapeError("kspace_degrade: degraded size " + std::to_string(Hs) + "x" +
                     std::to_string(Ws) + " too small");

  std::vector<std::complex<double>> x(H * W);
  for (size_t i = 0; i < H * W; ++i) x[i] = img.data()[i];
  std::vector<std::complex<double>> spec = dft2(x, H, W, FFTW_FORWARD);

  // Kept band: conjugate-symmetric central frequencies |f| <= N/(2s) - 1.
  // The unpaired Nyquist line of the even-sized crop is zeroed so the
  // real-part reconstructions below are exact.
  long bh = static_cast<long>(kept_band_halfwidth(H, s));
  long bw = static_cast<long>(kept_band_halfwidth(W, s));

  // Small spectrum (H/s x W/s), natural (DC-at-0) layout.
  std::vector<std::complex<double>> small(Hs * Ws, 0.0);
  for (long fy = -bh; fy <= bh; ++fy)
    for (long fx = -bw; fx <= bw; ++fx)
      small[freq_to_index(fy, Hs) * Ws + freq_to_index(fx, Ws)] =
          spec[freq_to_index(fy, H) * W + freq_to_index(fx, W)];

  // Zero-filled full-size spectrum.
  std::vector<std::complex<double>> padded(H * W, 0.0);
  for (long fy = -bh; fy <= bh; ++fy)
    for (long fx = -bw; fx <= bw; ++fx) {
      size_t idx = freq_to_index(fy, H) * W + freq_to_index(fx, W);
      padded[idx] = spec[idx];
    }

  std::vector<std::complex<double>> rec_small = dft2(small, Hs, Ws, FFTW_BACKWARD);
  std::vector<std::complex<double>> rec_full = dft2(padded, H, W, FFTW_BACKWARD);

  // Orthonormal scaling: forward 1/sqrt(HW), inverse 1/sqrt(N_out); the small
  // reconstruction carries an extra 1/s so constant images keep their value.
  double scale_small = 1.0 / (std::sqrt(static_cast<double>(H * W)) *
                              std::sqrt(static_cast<double>(Hs * Ws)) * static_cast<double>(s));
  double scale_full = 1.0 / static_cast<double>(H * W);

  std::vector<double> lr_small(Hs * Ws), lr_interp(H * W);
  double max_imag = 0.0;
  for (size_t i = 0; i < Hs * Ws; ++i) {
    lr_small[i] = rec_small[i].real() * scale_small;
    max_imag = std::max(max_imag, std::abs(rec_small[i].imag()) * scale_small);
  }
  for (size_t i = 0; i < H * W; ++i) {
    lr_interp[i] = rec_full[i].real() * scale_full;
    max_imag = std::max(max_imag, std::abs(rec_full[i].imag()) * scale_full);
  }
  if (max_imag > 1e-9)
    throw ValueError("kspace_degrade: residual imaginary part " + std::to_string(max_imag) +
                     " exceeds 1e-9; kept band is not conjugate-symmetric");

  DegradeResult out;
  out.lr_small = Tensor::from_vector({Hs, Ws}, std::move(lr_small));
  out.lr_interp = Tensor::from_vector({H, W}, std::move(lr_interp));
  return out;
}

// ============================================================================
// Misalignment
// ============================================================================

Tensor misalign(const Tensor& img, const MisalignSpec& spec) {
  if (img.ndim() != 2) throw ShapeError("misalign: expected [H, W], got " + shape_str(img.shape()));
  if (std::abs(spec.tx) > 4.0 || std::abs(spec.ty) > 4.0)
    throw UsageError("misalign: translation out of [-4, 4] pixels");
  if (std::abs(spec.theta_deg) > 3.0)
    throw UsageError("misalign: rotation out of [-3, 3] degrees");

  size_t H = img.size(0), W = img.size(1);
  const double* src = img.data();
  std::vector<double> out(H * W);
  double cy = (static_cast<double>(H) - 1.0) / 2.0;
  double cx = (static_cast<double>(W) - 1.0) / 2.0;
  bool rotate = spec.theta_deg != 0.0;
  double th = spec.theta_deg * M_PI / 180.0;
  double c = std::cos(th), sn = std::sin(th);

  auto sample = [&](double sy, double sx) {
    double fy = std::floor(sy), fx = std::floor(sx);
    double wy = sy - fy, wx = sx - fx;
    auto clampi = [](long v, long hi) { return v < 0 ? 0L : (v > hi ? hi : v); };
    long y0 = clampi(static_cast<long>(fy), static_cast<long>(H) - 1);
    long y1 = clampi(static_cast<long>(fy) + 1, static_cast<long>(H) - 1);
    long x0 = clampi(static_cast<long>(fx), static_cast<long>(W) - 1);
    long x1 = clampi(static_cast<long>(fx) + 1, static_cast<long>(W) - 1);
    double v00 = src[y0 * W + x0], v01 = src[y0 * W + x1];
    double v10 = src[y1 * W + x0], v11 = src[y1 * W + x1];
    double top = v00 + wx * (v01 - v00);
    double bot = v10 + wx * (v11 - v10);
    return top + wy * (bot - top);
  };

  for (size_t y = 0; y < H; ++y)
    for (size_t x = 0; x < W; ++x) {
      double sy, sx;
      if (rotate) {
        // Inverse map of translate(rotate(img)).
        double dy = static_cast<double>(y) - spec.ty - cy;
        double dx = static_cast<double>(x) - spec.tx - cx;
        sx = c * dx + sn * dy + cx;
        sy = -sn * dx + c * dy + cy;
      } else {
        sy = static_cast<double>(y) - spec.ty;
        sx = static_cast<double>(x) - spec.tx;
      }
      out[y * W + x] = sample(sy, sx);
    }
  return Tensor::from_vector({H, W}, std::move(out));
}

// ============================================================================
// Synthetic pairs
// ============================================================================

ImagePair synth_pair(uint64_t seed, size_t H, size_t W, size_t s) {
  if (H % s != 0 || W % s != 0)
    throw ShapeError("synth_pair: size " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by scale " + std::to_string(s));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);

  struct Blob {
    double cy, cx, a, b, phi, amp, soft;
  };
  size_t n_blobs = 5 + static_cast<size_t>(uni(rng) * 4.999);
  std::vector<Blob> blobs(n_blobs);
  double dim = static_cast<double>(std::min(H, W));
  for (auto& e : blobs) {
    e.cy = (0.15 + 0.7 * uni(rng)) * static_cast<double>(H);
    e.cx = (0.15 + 0.7 * uni(rng)) * static_cast<double>(W);
    e.a = (0.08 + 0.22 * uni(rng)) * dim;
    e.b = (0.08 + 0.22 * uni(rng)) * dim;
    e.phi = uni(rng) * M_PI;
    e.amp = 0.3 + 0.7 * uni(rng);
    e.soft = (0.02 + 0.05 * uni(rng)) * dim;
  }

  std::vector<double> field(H * W, 0.0);
  for (const auto& e : blobs) {
    double cphi = std::cos(e.phi), sphi = std::sin(e.phi);
    for (size_t y = 0; y < H; ++y)
      for (size_t x = 0; x < W; ++x) {
        double dy = static_cast<double>(y) - e.cy;
        double dx = static_cast<double>(x) - e.cx;
        double u = cphi * dx + sphi * dy;
        double v = -sphi * dx + cphi * dy;
        double r = std::sqrt((u / e.a) * (u / e.a) + (v / e.b) * (v / e.b));
        // Soft ellipse boundary.
        double m = 1.0 / (1.0 + std::exp((r - 1.0) * e.a / e.soft));
        field[y * W + x] += e.amp * m;
      }
  }
  auto [g, grec] = normalize(Tensor::from_vector({H, W}, std::move(field)));

  std::vector<double> ref(H * W), target(H * W);
  for (size_t i = 0; i < H * W; ++i) {
    double v = g.data()[i];
    ref[i] = std::pow(v, 0.6);
    target[i] = 0.1 + 0.8 * std::pow(1.0 - v, 1.4);  // inverted contrast
  }

  ImagePair pair;
  pair.scale = s;
  pair.seed = seed;
  auto [ref_n, ref_rec] = normalize(Tensor::from_vector({H, W}, std::move(ref)));
  auto [tgt_n, tgt_rec] = normalize(Tensor::from_vector({H, W}, std::move(target)));
  pair.ref = ref_n;
  pair.hr_target = tgt_n;
  pair.ref_norm = ref_rec;
  pair.target_norm = tgt_rec;
  DegradeResult deg = kspace_degrade(pair.hr_target, s);
  pair.lr_small = deg.lr_small;
  pair.lr_interp = deg.lr_interp;
  return pair;
}

// ============================================================================
// PNG IO
// ============================================================================

namespace {

struct PngReadCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* fp = nullptr;
  ~PngReadCloser() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

struct PngWriteCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* fp = nullptr;
  ~PngWriteCloser() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

}  // namespace

Tensor read_image(const std::string& path) {
  PngReadCloser ctx;
  ctx.fp = std::fopen(path.c_str(), "rb");
  if (!ctx.fp) throw IoError("cannot open image: " + path);
  unsigned char header[8];
  if (std::fread(header, 1, 8, ctx.fp) != 8 || png_sig_cmp(header, 0, 8))
    throw IoError("not a PNG file: " + path);
  ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!ctx.png) throw IoError("libpng init failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw IoError("libpng init failed");
  if (setjmp(png_jmpbuf(ctx.png))) throw IoError("corrupt PNG file: " + path);
  png_init_io(ctx.png, ctx.fp);
  png_set_sig_bytes(ctx.png, 8);
  png_read_info(ctx.png, ctx.info);

  png_uint_32 w = png_get_image_width(ctx.png, ctx.info);
  png_uint_32 h = png_get_image_height(ctx.png, ctx.info);
  int depth = png_get_bit_depth(ctx.png, ctx.info);
  int color = png_get_color_type(ctx.png, ctx.info);
  if (color != PNG_COLOR_TYPE_GRAY || (depth != 8 && depth != 16))
    throw IoError("unsupported PNG (need 8- or 16-bit grayscale): " + path);

  std::vector<unsigned char> row(w * (depth / 8));
  std::vector<double> data(static_cast<size_t>(w) * h);
  double maxval = depth == 8 ? 255.0 : 65535.0;
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(ctx.png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x) {
      unsigned v = depth == 8 ? row[x] : (static_cast<unsigned>(row[2 * x]) << 8) | row[2 * x + 1];
      data[static_cast<size_t>(y) * w + x] = static_cast<double>(v) / maxval;
    }
  }
  png_read_end(ctx.png, nullptr);
  return Tensor::from_vector({h, w}, std::move(data));
}

void write_image(const Tensor& img, const std::string& path, int bit_depth) {
  if (img.ndim() != 2) throw ShapeError("write_image: expected [H, W], got " + shape_str(img.shape()));
  if (bit_depth != 8 && bit_depth != 16) throw UsageError("write_image: bit depth must be 8 or 16");
  size_t H = img.size(0), W = img.size(1);

  PngWriteCloser ctx;
  ctx.fp = std::fopen(path.c_str(), "wb");
  if (!ctx.fp) throw IoError("cannot open for writing: " + path);
  ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!ctx.png) throw IoError("libpng init failed");
  ctx.info = png_create_info_struct(ctx.png);
  if (!ctx.info) throw IoError("libpng init failed");
  if (setjmp(png_jmpbuf(ctx.png))) throw IoError("PNG write failed: " + path);
  png_init_io(ctx.png, ctx.fp);
  png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H),
               bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(ctx.png, ctx.info);

  double maxval = bit_depth == 8 ? 255.0 : 65535.0;
  std::vector<unsigned char> row(W * (bit_depth / 8));
  for (size_t y = 0; y < H; ++y) {
    for (size_t x = 0; x < W; ++x) {
      double v = img.data()[y * W + x];
      v = std::min(1.0, std::max(0.0, v));
      // Round-half-even quantization.
      unsigned q = static_cast<unsigned>(std::nearbyint(v * maxval));
      if (bit_depth == 8) {
        row[x] = static_cast<unsigned char>(q);
      } else {
        row[2 * x] = static_cast<unsigned char>(q >> 8);
        row[2 * x + 1] = static_cast<unsigned char>(q & 0xff);
      }
    }
    png_write_row(ctx.png, row.data());
  }
  png_write_end(ctx.png, nullptr);
}

void export_pair(const ImagePair& pair, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_image(pair.ref, (fs::path(dir) / "ref.png").string());
  write_image(pair.hr_target, (fs::path(dir) / "hr.png").string());
  write_image(pair.lr_small, (fs::path(dir) / "lr_small.png").string());
  write_image(pair.lr_interp, (fs::path(dir) / "lr_interp.png").string());
  nlohmann::ordered_json meta;
  meta["scale"] = pair.scale;
  meta["seed"] = pair.seed;
  meta["normalization"] = {
      {"ref", {{"min", pair.ref_norm.min}, {"max", pair.ref_norm.max}}},
      {"target", {{"min", pair.target_norm.min}, {"max", pair.target_norm.max}}}};
  std::ofstream os(fs::path(dir) / "meta.json");
  os << meta.dump(2) << "\n";
}

}  // namespace canm
