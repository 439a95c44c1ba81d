// End-to-end acceptance runner. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "densemapnet/checkpoint.hpp"
#include "densemapnet/data_io.hpp"
#include "densemapnet/metrics.hpp"
#include "densemapnet/model.hpp"
#include "densemapnet/training.hpp"
#include "model_oracles.hpp"
#include "op_grad_suite.hpp"
#include "test_util.hpp"

using namespace dmn;
using dmn::testing::bit_equal;
using dmn::testing::random_tensor;
using dmn::testing::slurp;
using dmn::testing::TempDir;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void criterion(int id, const char* title, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!o.pass) ++failures;
  std::printf("criterion %d %s: %s |%s | %.2f s\n", id, o.pass ? "PASS" : "FAIL", title, o.detail.str().c_str(), secs);
  std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli_run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"dmn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string field(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind(key + "=", 0) == 0) return line.substr(key.size() + 1);
  }
  return {};
}

// Binary entropy of the targets: no prediction can push the BCE below it.
double target_entropy(const std::vector<StereoSample>& data, double dmax) {
  double sum = 0.0;
  double n = 0.0;
  for (const auto& s : data) {
    const auto t = normalize_disparity(s.disparity, dmax);
    for (std::int64_t i = 0; i < t.size(); ++i) {
      if (s.valid_mask.ptr()[i] == 0.0f) continue;
      const double p = std::clamp(static_cast<double>(t.ptr()[i]), kBceClamp, 1.0 - kBceClamp);
      const double q = t.ptr()[i];
      sum -= q * std::log(p) + (1.0 - q) * std::log(1.0 - p);
      n += 1.0;
    }
  }
  return sum / n;
}

}  // namespace

int main() {
  std::printf("acceptance run\n");

  criterion(1, "parameter count", [](Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    const Model m = Model::build(3, 32.0);
    const auto n = m.count_parameters();
    const auto want = oracle::symbolic_parameter_count(3);
    const double secs = seconds_since(t0);
    o.detail << " trainable=" << n.trainable << " oracle=" << want.trainable << " non_trainable=" << n.non_trainable;
    o.require(n.trainable >= 285000 && n.trainable <= 295000, "trainable in [285000, 295000]");
    o.require(n.trainable == want.trainable && n.non_trainable == want.non_trainable, "equals symbolic oracle");
    o.require(secs < 1.0, "runtime < 1 s");
  });

  criterion(2, "structural census", [](Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    const Model m = Model::build(3, 32.0);
    std::vector<int> concat;
    for (const char* name : {"Concat_2", "Concat_D1", "Concat_D2", "Concat_D3", "Concat_D4", "Concat_3", "Concat_4", "Concat_5"}) {
      concat.push_back(m.channels_of(name));
    }
    int convs = 0;
    int disparity = 0;
    for (const auto& l : m.layers()) {
      if (l.kind != LayerKind::conv && l.kind != LayerKind::conv_transpose) continue;
      ++convs;
      disparity += l.partition == Partition::disparity;
    }
    o.detail << " conv=" << convs << " disparity=" << disparity << " concat=";
    for (int c : concat) o.detail << c << ',';
    o.require(convs == 18 && m.conv_layer_count() == 18, "18 conv layers");
    o.require(disparity == 13 && m.conv_layer_count(Partition::disparity) == 13, "13 disparity conv layers");
    o.require(concat == std::vector<int>{160, 176, 192, 208, 224, 240, 33, 49}, "concat channel counts");
    o.require(seconds_since(t0) < 1.0, "runtime < 1 s");
  });

  criterion(3, "gradient correctness", [](Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    double worst_op = 0.0;
    std::string worst_name;
    for (const auto& [name, report] : oracle::operator_grad_suite()) {
      if (report.max_rel_error() >= worst_op) {
        worst_op = report.max_rel_error();
        worst_name = name;
      }
      o.require(report.passed() && report.max_rel_error() < 1e-4, name + " rel err < 1e-4");
    }
    ModelGraph<double> m = Model::build(3, 32.0, 3).cast<double>();
    const auto l = random_tensor<double>(Shape{2, 16, 16, 3}, 7, 0.0, 1.0);
    const auto r = random_tensor<double>(Shape{2, 16, 16, 3}, 8, 0.0, 1.0);
    const OpContext ctx{Mode::train, 4, 2};
    const auto full = oracle::full_graph_check(m, l, r, ctx, oracle::sample_trainable(m, 20, 11));
    o.detail << " worst_op=" << worst_name << ":" << worst_op << " full_graph_20=" << full.max_rel_error << " ("
             << full.worst << ")";
    o.require(full.sampled == 20 && full.max_rel_error < 1e-3, "full graph rel err < 1e-3");
    o.require(seconds_since(t0) < 120.0, "runtime < 2 min");
  });

  criterion(4, "shape and padding contract", [](Outcome& o) {
    Model m = Model::build(3, 192.0, 1);
    const auto l = random_tensor<float>(Shape{1, 540, 960, 3}, 1, 0.0, 1.0);
    const auto r = random_tensor<float>(Shape{1, 540, 960, 3}, 2, 0.0, 1.0);
    const auto out = m.forward(l, r, OpContext{Mode::inference, 0, 0});
    float lo = 1.0f;
    float hi = 0.0f;
    bool inside = true;
    for (const float v : out.data()) {
      inside = inside && v > 0.0f && v < 1.0f;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const int pooled = 540 / kPoolFactor;
    o.detail << " out=" << out.shape().str() << " pooled_h=" << pooled << " upsampled_h=" << pooled * kPoolFactor
             << " range=(" << lo << "," << hi << ")";
    o.require(out.shape() == Shape{1, 540, 960, 1}, "output 1x540x960x1");
    o.require(pooled * kPoolFactor == 536, "540 -> 67 -> 536 path");
    o.require(inside, "all values in (0,1)");
  });

  criterion(5, "desk-scale overfit", [](Outcome& o) {
    const double dmax = 32.0;
    const auto data = synth_generate(8, 96, 128, dmax, 1);
    Model m = Model::build(3, dmax, 1);
    TrainConfig cfg;
    cfg.epochs = 500;
    cfg.batch_size = 4;
    cfg.seed = 1;
    cfg.dmax = dmax;
    const TrainLog log = fit(m, data, cfg);
    const double first = log.epochs.front().loss;
    const double last = log.epochs.back().loss;
    const EvalReport eval = evaluate(m, data, dmax);

    // 50-epoch moving average sampled at the end of each 50-epoch block
    std::vector<double> ma;
    for (std::size_t end = 50; end <= log.epochs.size(); end += 50) {
      double s = 0.0;
      for (std::size_t i = end - 50; i < end; ++i) s += log.epochs[i].loss;
      ma.push_back(s / 50.0);
    }
    bool monotone = true;
    for (std::size_t i = 1; i < ma.size(); ++i) monotone = monotone && ma[i] <= ma[i - 1];

    o.detail << " epochs=" << log.epochs.size() << " bce_epoch1=" << first << " bce_final=" << last
             << " ratio=" << last / first << " target_entropy=" << target_entropy(data, dmax)
             << " train_mode_epe=" << log.epochs.back().epe << " eval_epe=" << eval.epe << " ma50=";
    for (double v : ma) o.detail << v << ',';
    o.require(eval.epe < 1.0, "final train EPE < 1.0 px");
    o.require(last <= 0.2 * first, "final BCE <= 20% of epoch-1 BCE");
    o.require(monotone, "non-increasing 50-epoch moving average");
  });

  criterion(6, "metric and conversion oracles", [](Outcome& o) {
    const auto p = random_tensor<float>(Shape{1, 64, 64, 1}, 3, 0.0, 64.0);
    const auto g = random_tensor<float>(Shape{1, 64, 64, 1}, 4, 0.0, 64.0);
    auto mask = random_tensor<float>(Shape{1, 64, 64, 1}, 5, 0.0, 1.0);
    for (auto& v : mask.data()) v = v < 0.7f ? 1.0f : 0.0f;
    double err = 0.0;
    double n = 0.0;
    for (std::int64_t i = 0; i < p.size(); ++i) {
      if (mask.ptr()[i] == 0.0f) continue;
      err += std::fabs(static_cast<double>(p.ptr()[i]) - g.ptr()[i]);
      n += 1.0;
    }
    const double rel = std::abs(epe(p, g, mask) - err / n) / (err / n);
    o.require(rel <= 1e-12, "epe vs naive oracle");

    double worst_z = 0.0;
    for (double d = 0.01; d < 500.0; d *= 1.1) {
      const double z = depth_from_disparity(d, 721.5, 0.54);
      worst_z = std::max(worst_z, std::abs(z * d - 721.5 * 0.54) / (721.5 * 0.54));
    }
    o.require(worst_z <= 2.0 * std::numeric_limits<double>::epsilon(), "z*d = f*B to rounding");

    // every f32 value in [0, dmax], for a power-of-two and the KITTI dmax
    std::int64_t mismatches = 0;
    std::int64_t swept = 0;
    for (const double dmax : {32.0, 43887.0 / 256.0}) {
      const float top_f = static_cast<float>(dmax);
      std::uint32_t top;
      std::memcpy(&top, &top_f, 4);
      const std::uint32_t chunk = 1u << 22;
      for (std::uint64_t base = 0; base <= top; base += chunk) {
        const auto count = static_cast<std::uint32_t>(std::min<std::uint64_t>(chunk, top - base + 1));
        Tensor<float> x(Shape{1, 1, static_cast<int>(count), 1});
        for (std::uint32_t i = 0; i < count; ++i) {
          const auto bits = static_cast<std::uint32_t>(base + i);
          std::memcpy(&x.ptr()[i], &bits, 4);
        }
        const auto back = denormalize_disparity(normalize_disparity(x, dmax), dmax);
        for (std::uint32_t i = 0; i < count; ++i) mismatches += std::memcmp(&back.ptr()[i], &x.ptr()[i], 4) != 0;
        swept += count;
      }
    }
    o.detail << " epe_rel=" << rel << " depth_rel=" << worst_z << " inverse_checked=" << swept << " inverse_mismatches=" << mismatches;
    o.require(mismatches == 0, "normalize/denormalize inverse exact");
  });

  criterion(7, "format round trips", [](Outcome& o) {
    TempDir dir("acceptance_formats");
    bool pfm_ok = true;
    for (int trial = 0; trial < 4; ++trial) {
      const auto map = random_tensor<float>(Shape{1, 17 + trial, 23 + trial * 3, 1}, 40 + trial, 0.0, 400.0);
      write_pfm(dir / "m.pfm", map, trial % 2 == 0);
      pfm_ok = pfm_ok && bit_equal(load_pfm(dir / "m.pfm"), map);
    }
    o.require(pfm_ok, "PFM bit exact");

    Model src = Model::build(3, 32.0, 9);
    const auto img = random_tensor<float>(Shape{2, 16, 16, 3}, 50, 0.0, 1.0);
    src.forward(img, img, OpContext{Mode::train, 1, 0});
    save_checkpoint(src, dir / "m.dmnw");
    Model dst = Model::build(3, 32.0, 10);
    load_checkpoint(dst, dir / "m.dmnw");
    bool ckpt_ok = dst.parameters().size() == src.parameters().size();
    for (std::size_t i = 0; ckpt_ok && i < src.parameters().size(); ++i) {
      ckpt_ok = bit_equal(src.parameters()[i].value, dst.parameters()[i].value);
    }
    o.require(ckpt_ok, "checkpoint bit exact");
    auto bytes = serialize_checkpoint(src);
    bytes[bytes.size() / 3] ^= 0x01;
    bool crc_caught = false;
    try {
      deserialize_checkpoint(dst, bytes);
    } catch (const CheckpointError& e) {
      crc_caught = e.kind() == CheckpointError::Kind::crc_mismatch;
    }
    o.require(crc_caught, "CRC validated on load");

    const auto pred = random_tensor<float>(Shape{1, 64, 96, 1}, 60, 0.0, 200.0);
    emit_disparity_png(pred, dir / "p.png", PngMode::gray16);
    const auto back = load_kitti_disparity(dir / "p.png");
    double worst = 0.0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
      worst = std::max(worst, std::abs(static_cast<double>(back.disparity.ptr()[i]) - pred.ptr()[i]));
    }
    o.detail << " gray16_max_err=" << worst;
    o.require(worst <= 1.0 / 512.0, "gray16 error <= 1/512 px");
  });

  criterion(8, "training determinism", [](Outcome& o) {
    TempDir dir("acceptance_determinism");
    const std::string ds = (dir / "ds").string();
    const auto s = cli_run({"synth", "--count", "8", "--height", "96", "--width", "128", "--dmax", "32", "--seed", "1", "--out", ds});
    o.require(s.code == 0, "synth: " + s.err);
    {
      std::ofstream cfg(dir / "run.cfg");
      cfg << "dataset_dir=" << ds << "\ndmax=32\nbatch_size=4\nepochs=3\nseed=1\noutput_dir=" << (dir / "run").string() << '\n';
    }
    const auto a = cli_run({"train", "--config", (dir / "run.cfg").string(), "--no-timing"});
    const std::string ckpt_a = slurp(dir / "run" / "model.dmnw");
    const std::string log_a = slurp(dir / "run" / "train.log");
    const auto b = cli_run({"train", "--config", (dir / "run.cfg").string(), "--no-timing"});
    const std::string ckpt_b = slurp(dir / "run" / "model.dmnw");
    const std::string log_b = slurp(dir / "run" / "train.log");
    o.detail << " checkpoint_bytes=" << ckpt_a.size() << " log_lines=" << std::count(log_a.begin(), log_a.end(), '\n');
    o.require(a.code == 0 && b.code == 0, "train runs succeed: " + a.err + b.err);
    o.require(!ckpt_a.empty() && ckpt_a == ckpt_b, "byte-identical checkpoints");
    o.require(!log_a.empty() && log_a == log_b && a.out == b.out, "identical loss logs");
  });

  criterion(9, "throughput benchmark", [](Outcome& o) {
    const auto r = cli_run({"bench", "--height", "540", "--width", "960", "--iterations", "10", "--warmup", "2"});
    const std::string ips = field(r.out, "images_per_second");
    o.detail << " images_per_second=" << ips << " median_seconds=" << field(r.out, "median_seconds")
             << " checksum=" << field(r.out, "checksum");
    o.require(r.code == 0, "bench exit code: " + r.err);
    o.require(field(r.out, "outputs_identical") == "true", "bit-identical outputs across iterations");
    o.require(!ips.empty() && std::stod(ips) > 0.0, "positive images/second");
  });

  std::printf("acceptance: %d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
