#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "flowdistill/config.hpp"
#include "flowdistill/image_io.hpp"
#include "flowdistill/pipeline.hpp"

namespace fd = flowdistill;

namespace {

// Bad flags, unreadable configs, and mismatched inputs exit with 2; genuine
// runtime failures (diverged training, failed writes) exit with 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      "seed",           "epochs",       "learning_rate", "batch_size",
      "height",         "width",        "dataset_size",  "corruption_prob",
      "distill",        "lambda_l1",    "lambda_perceptual",
      "lambda_smooth",  "lambda_hint",  "lambda_pred",
      "afwm.levels",    "afwm.base_width", "afwm.corr_radius",
      "gm.depth",       "gm.base_width",
  };
  return keys;
}

fd::PipelineConfig load_config(const std::string& path) {
  fd::KeyValueConfig kv;
  try {
    kv = fd::KeyValueConfig::from_file(path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  for (const auto& [key, value] : kv.entries())
    if (!known_config_keys().count(key))
      throw UsageError("config: unknown key '" + key + "' in " + path);

  fd::PipelineConfig c;
  try {
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
    c.epochs = kv.get_int("epochs", c.epochs);
    c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
    c.batch_size = kv.get_int("batch_size", c.batch_size);
    c.height = kv.get_int("height", c.height);
    c.width = kv.get_int("width", c.width);
    c.dataset_size = kv.get_int("dataset_size", c.dataset_size);
    c.corruption_prob = kv.get_double("corruption_prob", c.corruption_prob);
    c.distill = fd::parse_distill_mode(kv.get_string("distill", "adjustable"));
    c.weights.lambda_l1 = kv.get_double("lambda_l1", c.weights.lambda_l1);
    c.weights.lambda_perceptual =
        kv.get_double("lambda_perceptual", c.weights.lambda_perceptual);
    c.weights.lambda_smooth = kv.get_double("lambda_smooth", c.weights.lambda_smooth);
    c.weights.lambda_hint = kv.get_double("lambda_hint", c.weights.lambda_hint);
    c.weights.lambda_pred = kv.get_double("lambda_pred", c.weights.lambda_pred);
    c.afwm.levels = kv.get_int("afwm.levels", c.afwm.levels);
    c.afwm.base_width = kv.get_int("afwm.base_width", c.afwm.base_width);
    c.afwm.corr_radius = kv.get_int("afwm.corr_radius", c.afwm.corr_radius);
    c.gm.depth = kv.get_int("gm.depth", c.gm.depth);
    c.gm.base_width = kv.get_int("gm.base_width", c.gm.base_width);
    c.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  return c;
}

fd::Checkpoint load_checkpoint(const std::string& path) {
  try {
    return fd::Checkpoint::load(path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

void write_rows(const std::string& path, const std::string& header,
                const std::vector<std::string>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("log: cannot open " + path + " for writing");
  out << header << "\n";
  for (const auto& r : rows) out << r << "\n";
  if (!out) throw std::runtime_error("log: write to " + path + " failed");
}

std::string format_row(const char* fmt, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, ap);
  va_end(ap);
  return buf;
}

int cmd_train_teacher(const std::string& config_path, bool seed_set,
                      std::int64_t seed, const std::string& out) {
  fd::PipelineConfig cfg = load_config(config_path);
  if (seed_set) cfg.seed = static_cast<std::uint64_t>(seed);

  const auto result = fd::train_teacher<float>(cfg);
  result.checkpoint.save(out);

  std::vector<std::string> rows;
  for (const auto& r : result.history)
    rows.push_back(format_row("%d %.6f %.6f %.6f %.6f", r.epoch, r.l1, r.perceptual,
                              r.smooth, r.total));
  const std::string log_path = out + ".log";
  write_rows(log_path, "epoch l1 perc smooth total", rows);

  for (const auto& r : rows) std::printf("%s\n", r.c_str());
  std::printf("wrote %s\nwrote %s\n", out.c_str(), log_path.c_str());
  return 0;
}

int cmd_train_student(const std::string& config_path, const std::string& teacher_path,
                      bool seed_set, std::int64_t seed, const std::string& distill,
                      const std::string& out) {
  fd::PipelineConfig cfg = load_config(config_path);
  if (seed_set) cfg.seed = static_cast<std::uint64_t>(seed);
  if (!distill.empty()) {
    try {
      cfg.distill = fd::parse_distill_mode(distill);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }

  const fd::Checkpoint teacher = load_checkpoint(teacher_path);
  try {
    fd::require_teacher_compatible(teacher, cfg);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const auto result = fd::train_student<float>(cfg, teacher);
  result.checkpoint.save(out);

  std::vector<std::string> rows;
  for (const auto& r : result.history)
    rows.push_back(format_row("%d %.6f %.6f %.6f %.6f %.6f %.6f", r.epoch, r.l1,
                              r.perceptual, r.smooth, r.kd, r.gate_rate, r.total));
  const std::string log_path = out + ".log";
  write_rows(log_path, "epoch l1 perc smooth kd gate total", rows);

  for (const auto& r : rows) std::printf("%s\n", r.c_str());
  std::printf("wrote %s\nwrote %s\n", out.c_str(), log_path.c_str());
  return 0;
}

int cmd_infer(const std::string& ckpt_path, const std::string& person_path,
              const std::string& clothes_path, const std::string& out,
              const std::string& dump_warp) {
  const fd::Checkpoint ck = load_checkpoint(ckpt_path);

  fd::Image person_img, clothes_img;
  try {
    person_img = fd::load_image(person_path);
    clothes_img = fd::load_image(clothes_path);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  if (person_img.width != clothes_img.width || person_img.height != clothes_img.height)
    throw UsageError("infer: person is " + std::to_string(person_img.width) + "x" +
                     std::to_string(person_img.height) + " but clothes is " +
                     std::to_string(clothes_img.width) + "x" +
                     std::to_string(clothes_img.height));

  const auto person = fd::image_to_tensor<float>(person_img);
  const auto clothes = fd::image_to_tensor<float>(clothes_img);
  const int want = ck.meta_int("afwm.cond_channels");
  if (person.dim(1) != want)
    throw UsageError("infer: person image has " + std::to_string(person.dim(1)) +
                     " channels but the checkpoint conditions on " +
                     std::to_string(want));

  const auto result = fd::infer<float>(ck, person, clothes);
  fd::save_image(out, fd::tensor_to_image(result.image));
  std::printf("wrote %s\n", out.c_str());
  if (!dump_warp.empty()) {
    fd::save_image(dump_warp, fd::tensor_to_image(result.warped));
    std::printf("wrote %s\n", dump_warp.c_str());
  }
  return 0;
}

fd::Image binary_image(const fd::Tensor<float>& t) {
  const int h = t.dim(2), w = t.dim(3);
  fd::Image img{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      img.at(y, x, 0) = t.at(0, 0, y, x) > 0.5f ? 255 : 0;
  return img;
}

// One gray level per class; pixels the corruption pushed out of every class
// render white.
fd::Image parsing_image(const fd::Tensor<float>& seg) {
  const int c = seg.dim(1), h = seg.dim(2), w = seg.dim(3);
  fd::Image img{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int cls = -1;
      for (int ci = 0; ci < c; ++ci)
        if (seg.at(0, ci, y, x) > 0.5f) cls = ci;
      img.at(y, x, 0) = cls < 0 ? 255 : static_cast<std::uint8_t>(cls * 42);
    }
  return img;
}

fd::Image pose_image(const fd::Tensor<float>& pose) {
  const int c = pose.dim(1), h = pose.dim(2), w = pose.dim(3);
  fd::Image img{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float m = 0.0f;
      for (int ci = 0; ci < c; ++ci) m = std::max(m, pose.at(0, ci, y, x));
      img.at(y, x, 0) = static_cast<std::uint8_t>(std::lround(m * 255.0f));
    }
  return img;
}

int cmd_make_dataset(const std::string& config_path, bool seed_set, std::int64_t seed,
                     const std::string& out_dir) {
  fd::PipelineConfig cfg = load_config(config_path);
  if (seed_set) cfg.seed = static_cast<std::uint64_t>(seed);

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("make-dataset: cannot create " + out_dir);

  const auto samples = fd::synth_dataset<float>(
      cfg.dataset_size, fd::derive_seed(cfg.seed, fd::seedstream::kDataset),
      cfg.synth());

  std::string manifest;
  manifest += "flowdistill-dataset 1\n";
  manifest += format_row("count %d", cfg.dataset_size) + "\n";
  manifest += format_row("height %d", cfg.height) + "\n";
  manifest += format_row("width %d", cfg.width) + "\n";
  manifest += format_row("corruption_prob %.6g", cfg.corruption_prob) + "\n";
  manifest += format_row("seed %llu",
                         static_cast<unsigned long long>(cfg.seed)) + "\n";

  for (int i = 0; i < cfg.dataset_size; ++i) {
    const auto& s = samples[i];
    const std::string stem = format_row("sample_%03d", i);
    const auto path = [&](const char* part, const char* ext) {
      return stem + "_" + part + ext;
    };
    fd::save_image(out_dir + "/" + path("clothes", ".ppm"), fd::tensor_to_image(s.clothes));
    fd::save_image(out_dir + "/" + path("person", ".ppm"), fd::tensor_to_image(s.person));
    fd::save_image(out_dir + "/" + path("alt_clothes", ".ppm"),
                   fd::tensor_to_image(s.alt_clothes));
    fd::save_image(out_dir + "/" + path("preserved", ".pgm"),
                   binary_image(s.preserved_mask));
    fd::save_image(out_dir + "/" + path("garment_mask", ".pgm"),
                   binary_image(s.garment_mask));
    fd::save_image(out_dir + "/" + path("parsing", ".pgm"), parsing_image(s.segmentation));
    fd::save_image(out_dir + "/" + path("pose", ".pgm"), pose_image(s.pose));
    manifest += stem + " clothes person alt_clothes preserved garment_mask parsing pose\n";
  }

  const std::string manifest_path = out_dir + "/manifest.txt";
  std::ofstream mf(manifest_path, std::ios::binary);
  if (!mf) throw std::runtime_error("make-dataset: cannot open " + manifest_path);
  mf << manifest;
  if (!mf) throw std::runtime_error("make-dataset: write to " + manifest_path + " failed");

  std::printf("wrote %d samples to %s\n", cfg.dataset_size, out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"appearance-flow virtual try-on: training, distillation, inference"};
  app.require_subcommand(1);

  std::string config_path, out, teacher_path, distill;
  std::string ckpt_path, person_path, clothes_path, dump_warp;
  std::int64_t seed = 0;

  auto* tt = app.add_subcommand("train-teacher", "train the parser-based models");
  tt->add_option("--config", config_path, "key=value config file")->required();
  auto* tt_seed = tt->add_option("--seed", seed, "override the config seed");
  tt->add_option("--out", out, "checkpoint path")->default_val("teacher.ckpt");

  auto* ts = app.add_subcommand("train-student", "distill a parser-free student");
  ts->add_option("--config", config_path, "key=value config file")->required();
  ts->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
  ts->add_option("--distill", distill, "off, fixed, or adjustable");
  auto* ts_seed = ts->add_option("--seed", seed, "override the config seed");
  ts->add_option("--out", out, "checkpoint path")->default_val("student.ckpt");

  auto* inf = app.add_subcommand("infer", "dress a person image in a garment");
  inf->add_option("--student", ckpt_path, "student checkpoint")->required();
  inf->add_option("--person", person_path, "person image (png/ppm)")->required();
  inf->add_option("--clothes", clothes_path, "garment image (png/ppm)")->required();
  inf->add_option("--out", out, "output image")->required();
  inf->add_option("--dump-warp", dump_warp, "also write the warped garment");

  auto* md = app.add_subcommand("make-dataset", "materialize synthetic samples");
  md->add_option("--config", config_path, "key=value config file")->required();
  auto* md_seed = md->add_option("--seed", seed, "override the config seed");
  md->add_option("--out", out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  }

  try {
    if (tt->parsed())
      return cmd_train_teacher(config_path, tt_seed->count() > 0, seed, out);
    if (ts->parsed())
      return cmd_train_student(config_path, teacher_path, ts_seed->count() > 0, seed,
                               distill, out);
    if (inf->parsed())
      return cmd_infer(ckpt_path, person_path, clothes_path, out, dump_warp);
    if (md->parsed())
      return cmd_make_dataset(config_path, md_seed->count() > 0, seed, out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
  return 2;
}
