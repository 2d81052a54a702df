#include "crosskd/cli.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>

#include "CLI11.hpp"
#include "crosskd/errors.hpp"
#include "crosskd/grad_suite.hpp"
#include "crosskd/metrics.hpp"
#include "crosskd/trainer.hpp"

namespace crosskd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
  std::optional<double> lambda;
  std::optional<double> ce_weight;
  std::optional<std::size_t> epochs;
  bool noisy_eval = false;
  bool log_augment = false;
  std::vector<std::string> set;
  std::string teacher;
  std::string checkpoint;
  std::vector<std::string> pair;
};

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config, "Run configuration file (TOML subset)");
  app->add_option("--seed", o.seed, "Run seed");
  app->add_option("--out", o.out, "Output directory");
  app->add_option("--mode", o.mode, "cross-arch | logits-baseline | student-only | teacher-pretrain");
  app->add_option("--lambda", o.lambda, "Weight of the adversarial term");
  app->add_option("--ce-weight", o.ce_weight, "Weight of the hard-label cross-entropy term");
  app->add_option("--epochs", o.epochs, "Training epochs");
  app->add_flag("--noisy-eval", o.noisy_eval, "Also evaluate under the held-out corruption");
  app->add_flag("--log-augment", o.log_augment, "Log every multi-view generator draw");
  app->add_option("--set", o.set, "Generic override key=value (repeatable)")->take_all();
}

RunConfig resolve(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
  for (const auto& kv : o.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.mode.empty()) cfg.mode = mode_from_string(o.mode);
  if (o.lambda) cfg.train.lambda = *o.lambda;
  if (o.ce_weight) cfg.train.ce_weight = *o.ce_weight;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.log_augment) cfg.log_augment = true;
  if (!o.teacher.empty()) cfg.teacher_checkpoint = o.teacher;
  cfg.finalize();
  return cfg;
}

fs::path prepare_out(const RunConfig& cfg) {
  const fs::path out = cfg.out;
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  write_file_atomic(out / "resolved_config.toml", cfg.to_toml());
  return out;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream f(path, std::ios::out | mode);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  return f;
}

void log_event(std::ostream& out, json record) { out << record.dump() << "\n" << std::flush; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json evals_json(const TrainResult& r) {
  json a = json::array();
  for (const auto& e : r.evals) a.push_back({{"epoch", e.epoch}, {"val_top1", e.val_top1}});
  return a;
}

int cmd_pretrain(Options& o, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = resolve(o);
  cfg.mode = Mode::TeacherPretrain;
  auto splits = load_splits(cfg, true);
  const auto dir = prepare_out(cfg);
  log_event(out, {{"event", "start"}, {"verb", "pretrain-teacher"}, {"seed", cfg.seed}, {"train", splits.train.size()},
                  {"val", splits.val.size()}});
  auto csv = open_out(dir / "metrics.csv");
  TrainResult result;
  const Teacher teacher = pretrain_teacher(cfg, splits.train, &splits.val, &result, &csv);
  save_checkpoint(dir / "teacher.ckpt", teacher_checkpoint(teacher));

  json summary{{"verb", "pretrain-teacher"}, {"seed", cfg.seed}, {"steps", result.steps.size()},
               {"evals", evals_json(result)},
               {"val", evaluate(teacher, splits.val).to_json()},
               {"checksum", std::to_string(checksum(teacher.parameters()))}};
  if (o.noisy_eval) summary["val_noisy"] = evaluate(teacher, splits.val, true, cfg.noisy, cfg.seed).to_json();
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
  log_event(out, {{"event", "done"}, {"summary", summary}, {"seconds", seconds_since(t0)}});
  return kExitOk;
}

int cmd_distill(Options& o, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  auto cfg = resolve(o);
  if (cfg.mode == Mode::TeacherPretrain) throw ConfigError("distill does not run teacher-pretrain; use pretrain-teacher");
  std::optional<Teacher> teacher;
  if (cfg.mode != Mode::StudentOnly) {
    if (cfg.teacher_checkpoint.empty()) throw ConfigError("mode '" + to_string(cfg.mode) + "' needs --teacher");
    teacher.emplace(load_teacher(load_checkpoint(cfg.teacher_checkpoint)));
  }
  auto splits = load_splits(cfg, false);
  const auto dir = prepare_out(cfg);
  log_event(out, {{"event", "start"}, {"verb", "distill"}, {"mode", to_string(cfg.mode)}, {"seed", cfg.seed},
                  {"train", splits.train.size()}, {"val", splits.val.size()}});

  Trainer trainer(cfg, splits.train, &splits.val, teacher ? &*teacher : nullptr);
  std::ofstream augment;
  if (cfg.log_augment) {
    augment = open_out(dir / "augment_log.jsonl");
    trainer.set_augment_log(&augment);
  }
  auto csv = open_out(dir / "metrics.csv");
  const auto result = trainer.run(&csv);

  const auto training = trainer.training_checkpoint();
  save_checkpoint(dir / "training.ckpt", training);
  save_checkpoint(dir / "student.ckpt", export_student(training));

  json summary{{"verb", "distill"},
               {"mode", to_string(cfg.mode)},
               {"seed", cfg.seed},
               {"steps", result.steps.size()},
               {"disc_updates", result.disc_updates},
               {"evals", evals_json(result)},
               {"val", evaluate(trainer.student(), splits.val).to_json()}};
  if (teacher) {
    summary["teacher_checksum_before"] = std::to_string(result.teacher_checksum_before);
    summary["teacher_checksum_after"] = std::to_string(result.teacher_checksum_after);
    summary["teacher_unchanged"] = result.teacher_checksum_before == result.teacher_checksum_after;
  }
  if (o.noisy_eval) {
    summary["val_noisy"] = evaluate(trainer.student(), splits.val, true, cfg.noisy, cfg.seed).to_json();
  }
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
  log_event(out, {{"event", "done"}, {"summary", summary}, {"seconds", seconds_since(t0)}});
  return kExitOk;
}

int cmd_eval(Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  auto cfg = resolve(o);
  const auto ck = load_checkpoint(o.checkpoint);
  auto splits = load_splits(cfg, false);
  const auto dir = prepare_out(cfg);
  json record{{"checkpoint", o.checkpoint}, {"split", splits.val.split}};
  if (ck.meta.value("kind", "") == "teacher") {
    const auto teacher = load_teacher(ck);
    record["model"] = "teacher";
    record["clean"] = evaluate(teacher, splits.val).to_json();
    if (o.noisy_eval) record["noisy"] = evaluate(teacher, splits.val, true, cfg.noisy, cfg.seed).to_json();
  } else {
    auto student = load_student(ck);
    record["model"] = "student";
    record["clean"] = evaluate(student, splits.val).to_json();
    if (o.noisy_eval) record["noisy"] = evaluate(student, splits.val, true, cfg.noisy, cfg.seed).to_json();
  }
  auto f = open_out(dir / "eval.jsonl", std::ios::app);
  f << record.dump() << "\n";
  log_event(out, {{"event", "eval"}, {"result", record}});
  return kExitOk;
}

Tensor embed(const Checkpoint& ck, const Tensor& images) {
  if (ck.meta.value("kind", "") == "teacher") return teacher_embedding(load_teacher(ck), images);
  auto student = load_student(ck);
  return student_embedding(student, images);
}

int cmd_transferability(Options& o, std::ostream& out) {
  if (o.pair.size() != 2) throw ConfigError("transferability needs --pair <teacher.ckpt> <student.ckpt>");
  auto cfg = resolve(o);
  const auto teacher_ck = load_checkpoint(o.pair[0]);
  const auto student_ck = load_checkpoint(o.pair[1]);
  auto splits = load_splits(cfg, false);
  const auto dir = prepare_out(cfg);
  std::vector<std::size_t> idx(splits.val.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto images = splits.val.images(idx);
  auto report = transferability_from_features(embed(student_ck, images), embed(teacher_ck, images));
  report.teacher_id = o.pair[0];
  report.student_id = o.pair[1];
  auto f = open_out(dir / "transferability.jsonl", std::ios::app);
  f << report.to_json().dump() << "\n";
  out << report.to_json().dump() << "\n";
  return kExitOk;
}

int cmd_grad_check(Options& o, std::ostream& out) {
  const std::uint64_t base = o.seed.value_or(0);
  const std::vector<std::uint64_t> seeds{base, base + 1, base + 2};
  const auto result = run_grad_suite(seeds, 1e-4, &out);
  out << "grad-check: " << result.reports.size() << " checks, worst relative error " << result.worst << ", "
      << result.seconds << " s, " << (result.passed ? "PASS" : "FAIL") << "\n";
  return result.passed ? kExitOk : kExitNumeric;
}

int cmd_export(Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("export needs --checkpoint <training.ckpt>");
  const auto exported = export_student(load_checkpoint(o.checkpoint));
  fs::path target = o.out.empty() ? fs::path(o.checkpoint).parent_path() / "student.ckpt" : fs::path(o.out);
  if (fs::is_directory(target)) target /= "student.ckpt";
  if (fs::exists(target) && fs::equivalent(target, o.checkpoint)) {
    throw ConfigError("export would overwrite its input checkpoint");
  }
  save_checkpoint(target, exported);
  log_event(out, {{"event", "export"}, {"from", o.checkpoint}, {"to", target.string()},
                  {"tensors", exported.tensors.size()}});
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-architecture distillation from a ViT teacher to a CNN student", "crosskd"};
  app.require_subcommand(1);
  Options o;
  auto* pretrain = app.add_subcommand("pretrain-teacher", "Train the ViT teacher on the teacher pool");
  auto* distill = app.add_subcommand("distill", "Train a student (cross-arch, logits-baseline or student-only)");
  auto* eval = app.add_subcommand("eval", "Top-1/top-5 accuracy of a checkpoint on the val split");
  auto* transfer = app.add_subcommand("transferability", "Aligned cosine similarity between two models");
  auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every differentiable op and loss");
  auto* exp = app.add_subcommand("export", "Strip projectors and discriminator from a training checkpoint");
  for (auto* sub : {pretrain, distill, eval, transfer, grad, exp}) add_common(sub, o);
  distill->add_option("--teacher", o.teacher, "Teacher checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "Student or teacher checkpoint")->required();
  exp->add_option("--checkpoint", o.checkpoint, "Training checkpoint")->required();
  transfer->add_option("--pair", o.pair, "Teacher and student checkpoints")->expected(2)->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  try {
    if (*pretrain) return cmd_pretrain(o, out);
    if (*distill) return cmd_distill(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*transfer) return cmd_transferability(o, out);
    if (*grad) return cmd_grad_check(o, out);
    if (*exp) return cmd_export(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitConfig;
}

}  // namespace crosskd
