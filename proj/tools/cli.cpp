#include "cli.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "densemapnet/checkpoint.hpp"
#include "densemapnet/data_io.hpp"
#include "densemapnet/metrics.hpp"
#include "densemapnet/model.hpp"
#include "densemapnet/training.hpp"

namespace dmn::cli {
namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T v{};
  const char* first = value.data();
  const char* last = first + value.size();
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last) {
    throw UsageError("config: bad value '" + value + "' for " + key);
  }
  return v;
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key == "dataset_dir") cfg.dataset_dir = value;
    else if (key == "dmax") cfg.dmax = parse_number<double>(key, value);
    else if (key == "channels") cfg.channels = parse_number<int>(key, value);
    else if (key == "lr") cfg.lr = parse_number<double>(key, value);
    else if (key == "decay") cfg.decay = parse_number<double>(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_number<int>(key, value);
    else if (key == "epochs") cfg.epochs = parse_number<int>(key, value);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "checkpoint_path") cfg.checkpoint_path = value;
    else if (key == "output_dir") cfg.output_dir = value;
    else throw UsageError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

RunConfig merge(RunConfig base, const RunConfig& over) {
  auto take = [](auto& dst, const auto& src) {
    if (src) dst = src;
  };
  take(base.dataset_dir, over.dataset_dir);
  take(base.dmax, over.dmax);
  take(base.channels, over.channels);
  take(base.lr, over.lr);
  take(base.decay, over.decay);
  take(base.batch_size, over.batch_size);
  take(base.epochs, over.epochs);
  take(base.seed, over.seed);
  take(base.checkpoint_path, over.checkpoint_path);
  take(base.output_dir, over.output_dir);
  return base;
}

namespace {

// Flags shared by train and eval. Paths stay strings until merged.
struct ConfigFlags {
  std::string config_file;
  std::optional<std::string> dataset_dir;
  std::optional<double> dmax;
  std::optional<int> channels;
  std::optional<double> lr;
  std::optional<double> decay;
  std::optional<int> batch_size;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> checkpoint_path;
  std::optional<std::string> output_dir;
  std::string split = "all";
  int checkpoint_every = 0;
  bool no_timing = false;

  void attach(CLI::App* cmd, bool training) {
    cmd->add_option("--config", config_file, "key=value run configuration file");
    cmd->add_option("--dataset-dir", dataset_dir, "dataset directory (left/, right/, disp/, meta.cfg)");
    cmd->add_option("--dmax", dmax, "maximum disparity in pixels");
    cmd->add_option("--channels", channels, "input channels, 1 or 3");
    cmd->add_option("--seed", seed, "shuffle, split and initialisation seed");
    cmd->add_option("--checkpoint,--checkpoint-path", checkpoint_path, "checkpoint file");
    cmd->add_option("--output-dir", output_dir, "directory for logs and outputs");
    cmd->add_option("--split", split, "samples to use: train, test or all")
        ->check(CLI::IsMember({"train", "test", "all"}));
    cmd->add_flag("--no-timing", no_timing, "omit wall-clock fields from the output");
    if (training) {
      cmd->add_option("--lr", lr, "learning rate");
      cmd->add_option("--decay", decay, "learning-rate decay per update");
      cmd->add_option("--batch-size", batch_size, "minibatch size");
      cmd->add_option("--epochs", epochs, "training epochs");
      cmd->add_option("--checkpoint-every", checkpoint_every, "epochs between checkpoints, 0 = end only")
          ->check(CLI::NonNegativeNumber);
    }
  }

  RunConfig resolve() const {
    RunConfig file = config_file.empty() ? RunConfig{} : load_run_config(config_file);
    RunConfig over;
    if (dataset_dir) over.dataset_dir = *dataset_dir;
    over.dmax = dmax;
    over.channels = channels;
    over.lr = lr;
    over.decay = decay;
    over.batch_size = batch_size;
    over.epochs = epochs;
    over.seed = seed;
    if (checkpoint_path) over.checkpoint_path = *checkpoint_path;
    if (output_dir) over.output_dir = *output_dir;
    return merge(file, over);
  }
};

int checked_channels(const RunConfig& cfg) {
  const int c = cfg.channels.value_or(3);
  if (c != 1 && c != 3) throw UsageError("channels must be 1 or 3");
  return c;
}

fs::path require_dataset(const RunConfig& cfg) {
  if (!cfg.dataset_dir) throw UsageError("no dataset_dir given");
  const fs::path dir = *cfg.dataset_dir;
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  if (!fs::exists(dir / "meta.cfg")) throw IoError("dataset has no meta.cfg: " + dir.string());
  return dir;
}

fs::path prepare_output_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.output_dir.value_or("out");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
  return dir;
}

std::vector<StereoSample> select_split(const std::vector<StereoSample>& all, const std::string& split,
                                       std::uint64_t seed) {
  if (all.empty()) throw IoError("dataset is empty");
  const SplitResult parts = split_filter(all, seed);
  std::vector<std::size_t> which;
  if (split == "train") {
    which = parts.train.samples;
  } else if (split == "test") {
    which = parts.test.samples;
  } else {
    which = parts.train.samples;
    which.insert(which.end(), parts.test.samples.begin(), parts.test.samples.end());
    std::sort(which.begin(), which.end());
  }
  if (which.empty()) throw UsageError("split '" + split + "' selects no samples");
  std::vector<StereoSample> out;
  for (std::size_t i : which) out.push_back(all[i]);
  return out;
}

int cmd_synth(int count, int height, int width, double dmax, std::uint64_t seed, const std::string& out_dir,
              std::ostream& out) {
  if (count < 1) throw UsageError("--count must be >= 1");
  if (height < 8 || width < 8) throw UsageError("--height and --width must be >= 8");
  if (!(dmax > 0.0) || dmax >= width) throw UsageError("--dmax must lie in (0, width)");
  const fs::path dir = out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  const auto samples = synth_generate(count, height, width, dmax, seed);
  write_dataset(dir, samples, DatasetMeta{count, height, width, dmax, seed});
  out << "samples=" << samples.size() << "\ndmax=" << dmax << '\n';
  return kExitOk;
}

int cmd_train(const ConfigFlags& flags, std::ostream& out) {
  const RunConfig cfg = flags.resolve();
  const int channels = checked_channels(cfg);
  const fs::path data_dir = require_dataset(cfg);
  const fs::path out_dir = prepare_output_dir(cfg);
  const fs::path ckpt = cfg.checkpoint_path.value_or(out_dir / "model.dmnw");
  if (ckpt.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(ckpt.parent_path(), ec);
    if (ec) throw IoError("cannot create " + ckpt.parent_path().string());
  }
  std::ofstream log(out_dir / "train.log", std::ios::trunc);
  if (!log) throw IoError("cannot write " + (out_dir / "train.log").string());

  const DatasetMeta meta = read_dataset_meta(data_dir);
  TrainConfig tc;
  tc.dmax = cfg.dmax.value_or(meta.dmax);
  tc.learning_rate = cfg.lr.value_or(tc.learning_rate);
  tc.decay = cfg.decay.value_or(tc.decay);
  tc.batch_size = cfg.batch_size.value_or(tc.batch_size);
  tc.epochs = cfg.epochs.value_or(tc.epochs);
  tc.seed = cfg.seed.value_or(tc.seed);
  tc.checkpoint_every = flags.checkpoint_every;
  tc.checkpoint_path = ckpt;
  tc.validate();

  const auto dataset = select_split(read_dataset(data_dir, channels, tc.dmax), flags.split, tc.seed);
  Model model = Model::build(channels, tc.dmax, tc.seed);
  FitHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    const std::string line = r.to_line(!flags.no_timing);
    out << line << '\n';
    out.flush();
    log << line << '\n';
    log.flush();
  };
  fit(model, dataset, tc, hooks);
  out << "checkpoint=" << ckpt.string() << '\n';
  return kExitOk;
}

Model load_model(int channels, double dmax, const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw IoError("checkpoint not found: " + ckpt.string());
  Model model = Model::build(channels, dmax);
  load_checkpoint(model, ckpt);
  return model;
}

int cmd_eval(const ConfigFlags& flags, std::ostream& out) {
  const RunConfig cfg = flags.resolve();
  const int channels = checked_channels(cfg);
  const fs::path data_dir = require_dataset(cfg);
  if (!cfg.checkpoint_path && !cfg.output_dir) throw UsageError("no checkpoint given");
  const fs::path ckpt = cfg.checkpoint_path ? *cfg.checkpoint_path : *cfg.output_dir / "model.dmnw";
  const DatasetMeta meta = read_dataset_meta(data_dir);
  const double dmax = cfg.dmax.value_or(meta.dmax);
  if (!(dmax > 0.0)) throw UsageError("dmax must be > 0");
  Model model = load_model(channels, dmax, ckpt);
  const auto samples = select_split(read_dataset(data_dir, channels, dmax), flags.split, cfg.seed.value_or(1));
  out << evaluate(model, samples, dmax).to_text(!flags.no_timing);
  return kExitOk;
}

struct PredictFlags {
  std::string left;
  std::string right;
  std::string checkpoint;
  std::string out = "prediction";
  int channels = 3;
  double dmax = 0.0;
};

int cmd_predict(const PredictFlags& f, std::ostream& out) {
  if (f.channels != 1 && f.channels != 3) throw UsageError("--channels must be 1 or 3");
  if (!(f.dmax > 0.0)) throw UsageError("--dmax must be > 0");
  for (const auto& p : {f.left, f.right}) {
    if (!fs::exists(p)) throw IoError("image not found: " + p);
  }
  Model model = load_model(f.channels, f.dmax, f.checkpoint);
  const fs::path dir = f.out;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());

  const Tensor<float> left = load_stereo_image(f.left, f.channels);
  const Tensor<float> right = load_stereo_image(f.right, f.channels);
  const Tensor<float> pred = model.forward(left, right, OpContext{Mode::inference, 0, 0});
  const Tensor<float> px = denormalize_disparity(pred, f.dmax);
  emit_disparity_png(px, dir / "disparity_gray16.png", PngMode::gray16);
  emit_disparity_png(px, dir / "disparity_color.png", PngMode::colormap, f.dmax);

  double sum = 0.0;
  float lo = px.ptr()[0];
  float hi = px.ptr()[0];
  for (const float v : px.data()) {
    sum += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  out << std::setprecision(9) << "gray16=" << (dir / "disparity_gray16.png").string() << '\n'
      << "colormap=" << (dir / "disparity_color.png").string() << '\n'
      << "mean_disparity=" << sum / static_cast<double>(px.size()) << '\n'
      << "min_disparity=" << lo << '\n'
      << "max_disparity=" << hi << '\n';
  return kExitOk;
}

int cmd_params(int channels, std::ostream& out) {
  if (channels != 1 && channels != 3) throw UsageError("--channels must be 1 or 3");
  const Model model = Model::build(channels, 1.0);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-18s %-15s %6s %8s %8s %10s %12s\n", "layer", "kind", "kernel", "dilation",
                "channels", "trainable", "nontrainable");
  out << buf;
  for (const LayerSpec& l : model.layers()) {
    std::int64_t tr = 0;
    std::int64_t nt = 0;
    for (const auto& p : model.parameters()) {
      if (p.layer != l.name) continue;
      (p.trainable ? tr : nt) += p.value.size();
    }
    std::snprintf(buf, sizeof(buf), "%-18s %-15s %6d %8d %8d %10lld %12lld\n", l.name.c_str(), to_string(l.kind),
                  l.kernel, l.dilation, model.channels_of(l.name), static_cast<long long>(tr),
                  static_cast<long long>(nt));
    out << buf;
  }
  const ParameterCount n = model.count_parameters();
  out << "conv_layers=" << model.conv_layer_count() << '\n'
      << "disparity_conv_layers=" << model.conv_layer_count(Partition::disparity) << '\n'
      << "trainable=" << n.trainable << '\n'
      << "non_trainable=" << n.non_trainable << '\n'
      << "total=" << n.trainable + n.non_trainable << '\n';
  return kExitOk;
}

struct BenchFlags {
  int height = 540;
  int width = 960;
  int batch = 1;
  int channels = 3;
  int iterations = 10;
  int warmup = 2;
  std::uint64_t seed = 1;
  std::string checkpoint;
  bool no_timing = false;
};

int cmd_bench(const BenchFlags& f, std::ostream& out) {
  if (f.channels != 1 && f.channels != 3) throw UsageError("--channels must be 1 or 3");
  if (f.height < 8 || f.width < 8 || f.batch < 1) throw UsageError("bad bench shape");
  if (f.iterations < 10) throw UsageError("--iterations must be >= 10");
  if (f.warmup < 2) throw UsageError("--warmup must be >= 2");
  Model model = f.checkpoint.empty() ? Model::build(f.channels, 1.0, f.seed)
                                     : load_model(f.channels, 1.0, f.checkpoint);
  const Shape shape{f.batch, f.height, f.width, f.channels};
  const BenchResult r = benchmark_throughput(model, shape, f.iterations, f.seed, f.warmup);
  char sum[16];
  std::snprintf(sum, sizeof(sum), "%08x", r.checksum);
  out << "shape=" << shape.str() << '\n'
      << "iterations=" << r.iterations << '\n'
      << "checksum=" << sum << '\n'
      << "outputs_identical=" << (r.outputs_identical ? "true" : "false") << '\n';
  if (!f.no_timing) {
    out << std::setprecision(9) << "median_seconds=" << r.median_seconds << '\n'
        << "images_per_second=" << r.images_per_second << '\n';
  }
  return r.outputs_identical ? kExitOk : kExitNumerical;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"DenseMapNet stereo disparity: synthesize, train, evaluate, predict", "dmn"};
  app.require_subcommand(1);

  int s_count = 8, s_height = 96, s_width = 128;
  double s_dmax = 32.0;
  std::uint64_t s_seed = 1;
  std::string s_out;
  auto* synth = app.add_subcommand("synth", "write a synthetic stereo dataset");
  synth->add_option("--count", s_count, "number of pairs");
  synth->add_option("--height", s_height, "image height");
  synth->add_option("--width", s_width, "image width");
  synth->add_option("--dmax", s_dmax, "maximum disparity in pixels");
  synth->add_option("--seed", s_seed, "generator seed");
  synth->add_option("--out", s_out, "output directory")->required();

  ConfigFlags train_flags;
  auto* train = app.add_subcommand("train", "train on a dataset directory");
  train_flags.attach(train, true);

  ConfigFlags eval_flags;
  auto* eval = app.add_subcommand("eval", "end-point error of a checkpoint on a dataset");
  eval_flags.attach(eval, false);

  PredictFlags pf;
  auto* predict = app.add_subcommand("predict", "disparity maps for one stereo pair");
  predict->add_option("--left", pf.left, "left image")->required();
  predict->add_option("--right", pf.right, "right image")->required();
  predict->add_option("--checkpoint", pf.checkpoint, "checkpoint file")->required();
  predict->add_option("--out", pf.out, "output directory");
  predict->add_option("--channels", pf.channels, "input channels, 1 or 3");
  predict->add_option("--dmax", pf.dmax, "maximum disparity in pixels")->required();

  int p_channels = 3;
  auto* params = app.add_subcommand("params", "per-layer parameter table");
  params->add_option("--channels", p_channels, "input channels, 1 or 3");

  BenchFlags bf;
  auto* bench = app.add_subcommand("bench", "inference throughput");
  bench->add_option("--height", bf.height, "image height");
  bench->add_option("--width", bf.width, "image width");
  bench->add_option("--batch", bf.batch, "pairs per pass");
  bench->add_option("--channels", bf.channels, "input channels, 1 or 3");
  bench->add_option("--iterations", bf.iterations, "timed passes");
  bench->add_option("--warmup", bf.warmup, "discarded passes");
  bench->add_option("--seed", bf.seed, "input and weight seed");
  bench->add_option("--checkpoint", bf.checkpoint, "use trained weights");
  bench->add_flag("--no-timing", bf.no_timing, "omit timing fields");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(s_count, s_height, s_width, s_dmax, s_seed, s_out, out);
    if (*train) return cmd_train(train_flags, out);
    if (*eval) return cmd_eval(eval_flags, out);
    if (*predict) return cmd_predict(pf, out);
    if (*params) return cmd_params(p_channels, out);
    if (*bench) return cmd_bench(bf, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitUsage;
}

}  // namespace dmn::cli
