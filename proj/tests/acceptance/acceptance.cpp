// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "crosskd/checkpoint.hpp"
#include "crosskd/cli.hpp"
#include "crosskd/grad_suite.hpp"
#include "crosskd/metrics.hpp"
#include "crosskd/projectors.hpp"
#include "crosskd/robust.hpp"
#include "crosskd/trainer.hpp"

namespace fs = std::filesystem;
using namespace crosskd;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor randn(Shape shape, std::uint64_t seed, const std::string& label) {
  RngStream rng(seed, label);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

void fill(Tensor& t, double value) {
  for (auto& x : t.mutable_data()) x = value;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Outcome gradient_suite() {
  Outcome o;
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto r = run_grad_suite(seeds, 1e-4);
  o.check(r.passed, "relative error < 1e-4 on every check");
  o.check(r.seconds < 60.0, "runtime < 60 s");
  o.note(std::to_string(r.reports.size()) + " checks, worst " + fmt(r.worst, 3) + ", " + fmt(r.seconds, 3) + " s");
  return o;
}

Outcome fixed_points() {
  Outcome o;
  AttentionTriple t{randn({2, 16, 8}, 1, "q"), randn({2, 16, 8}, 1, "k"), randn({2, 16, 8}, 1, "v")};
  AttentionTriple s{randn({2, 16, 8}, 2, "q"), randn({2, 16, 8}, 2, "k"), randn({2, 16, 8}, 2, "v")};
  const auto attn_t = attention(t.query, t.key, t.value, 8.0);
  const auto mask = ReplacementMask::uniform(2 * 16 * 8, true);
  const double l1 = loss_proj1(pca_attention(s, t, mask), attn_t, t.value, t.value, 8.0).item();
  o.check(l1 == 0.0, "L_proj1 = 0 under all-true masks");

  const auto h = randn({2, 16, 32}, 3, "h");
  const double l2 = loss_proj2(h, h).item();
  o.check(l2 == 0.0, "L_proj2 = 0 at h'_S = h_T");

  RngStream init(0, "init/disc");
  Discriminator disc(16, 32, 64, init);
  for (auto& [name, p] : disc.parameters()) fill(p, 0.0);
  const auto hs = randn({2, 16, 32}, 4, "hs");
  const double mad = loss_mad(disc, h, hs).item();
  const double mvg = loss_mvg(disc, hs).item();
  o.check(std::abs(mad - 2.0 * std::log(2.0)) <= 1e-9, "loss_mad = 2 ln 2");
  o.check(std::abs(mvg - std::log(0.5)) <= 1e-9, "loss_mvg = ln 0.5");
  o.note("L_proj1 " + fmt(l1) + ", L_proj2 " + fmt(l2) + ", mad-2ln2 " + fmt(mad - 2.0 * std::log(2.0), 3) +
         ", mvg-ln0.5 " + fmt(mvg - std::log(0.5), 3));
  return o;
}

Outcome oracles() {
  Outcome o;
  double conv_err = 0.0;
  struct Case {
    std::size_t b, cin, cout, h, w, k, stride, pad;
  };
  for (const Case c : {Case{2, 3, 4, 7, 6, 3, 1, 1}, Case{1, 2, 3, 8, 8, 3, 2, 1}, Case{2, 1, 2, 5, 5, 1, 1, 0},
                       Case{1, 4, 2, 9, 7, 5, 2, 2}}) {
    const auto x = randn({c.b, c.cin, c.h, c.w}, 10, "x");
    const auto k = randn({c.cout, c.cin, c.k, c.k}, 11, "k");
    const auto bias = randn({c.cout}, 12, "b");
    const auto y = conv2d(x, k, bias, c.stride, c.pad);
    const std::size_t oh = (c.h + 2 * c.pad - c.k) / c.stride + 1, ow = (c.w + 2 * c.pad - c.k) / c.stride + 1;
    for (std::size_t n = 0; n < c.b; ++n)
      for (std::size_t co = 0; co < c.cout; ++co)
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j) {
            double acc = bias.at({co});
            for (std::size_t ci = 0; ci < c.cin; ++ci)
              for (std::size_t u = 0; u < c.k; ++u)
                for (std::size_t v = 0; v < c.k; ++v) {
                  const long r = static_cast<long>(i * c.stride + u) - static_cast<long>(c.pad);
                  const long q = static_cast<long>(j * c.stride + v) - static_cast<long>(c.pad);
                  if (r < 0 || q < 0 || r >= static_cast<long>(c.h) || q >= static_cast<long>(c.w)) continue;
                  acc += x.at({n, ci, static_cast<std::size_t>(r), static_cast<std::size_t>(q)}) *
                         k.at({co, ci, u, v});
                }
            conv_err = std::max(conv_err, std::abs(acc - y.at({n, co, i, j})));
          }
  }
  o.check(conv_err <= 1e-10, "conv2d matches naive loops");

  const double q[2] = {0.7, -1.3}, kk[2] = {0.2, 1.5}, v[2] = {2.0, -0.5};
  const auto a = attention(Tensor::from({2, 1}, {q[0], q[1]}), Tensor::from({2, 1}, {kk[0], kk[1]}),
                           Tensor::from({2, 1}, {v[0], v[1]}), 1.0);
  double attn_err = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const double e0 = std::exp(q[i] * kk[0]), e1 = std::exp(q[i] * kk[1]);
    attn_err = std::max(attn_err, std::abs(a.at({i, 0}) - (e0 * v[0] + e1 * v[1]) / (e0 + e1)));
  }
  o.check(attn_err <= 1e-12, "attention N=2, d=1 matches hand formula");

  const auto s = randn({60, 6}, 20, "s");
  const auto w = randn({6, 4}, 21, "w");
  const auto fit = fit_alignment(s, matmul(s, w), 0.0);
  double fit_err = 0.0;
  const auto wv = w.values();
  for (std::size_t i = 0; i < wv.size(); ++i) fit_err = std::max(fit_err, std::abs(fit.weights[i] - wv[i]));
  o.check(fit_err <= 1e-6, "fit_alignment recovers planted map");
  o.note("conv " + fmt(conv_err, 3) + ", attention " + fmt(attn_err, 3) + ", alignment " + fmt(fit_err, 3));
  return o;
}

Outcome schedule() {
  Outcome o;
  RunConfig cfg;
  cfg.seed = 5;
  cfg.data.per_class = 1;
  cfg.data.val_per_class = 1;
  cfg.train.batch_size = 4;
  cfg.train.disc_hidden = 32;
  cfg.train.disc_period = 5;
  const auto train = synth_dataset(cfg.seed, cfg.data.classes, 1, 32, 32, "train");
  RngStream init(cfg.seed, "init/teacher");
  Teacher teacher(cfg.teacher, init);
  std::string counts;
  for (std::size_t steps : {1, 4, 5, 6, 11, 23, 100}) {
    cfg.train.epochs = steps;
    cfg.train.milestones = {};
    cfg.finalize();
    Trainer trainer(cfg, train, nullptr, &teacher);
    const auto r = trainer.run();
    const std::size_t expected = (steps - 1) / 5 + 1;
    o.check(r.steps.size() == steps, "step count " + std::to_string(steps));
    o.check(r.disc_updates == expected, "updates after " + std::to_string(steps) + " steps");
    o.check(r.teacher_checksum_before == r.teacher_checksum_after, "teacher checksum after " + std::to_string(steps));
    counts += (counts.empty() ? "" : " ") + std::to_string(steps) + ":" + std::to_string(r.disc_updates);
    if (steps == 23) {
      const auto exported = export_student(trainer.training_checkpoint());
      const auto student_params = trainer.student().parameters().size() + trainer.student().buffers().size();
      bool only_student = exported.tensors.size() == student_params;
      for (const auto& t : exported.tensors) only_student = only_student && t.name.rfind("student.", 0) == 0;
      o.check(only_student, "export holds only student parameters");
    }
  }
  o.note("steps:updates " + counts);
  return o;
}

// Directional protocol: one teacher pretrained once, then per seed a student
// trained four ways on the same data.
struct SeedRun {
  double cross = 0, student_only = 0, logits = 0, plain_cross = 0;
  double cross_drop = 0, plain_drop = 0;
  double cos_cross = 0, cos_student = 0;
};

RunConfig student_config(std::uint64_t seed, Mode mode) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.mode = mode;
  cfg.data.per_class = 50;
  cfg.data.val_per_class = 100;
  cfg.train.batch_size = 16;
  cfg.finalize();
  return cfg;
}

struct Trained {
  std::unique_ptr<Trainer> trainer;
  Dataset train, val;
};

std::vector<SeedRun> directional_runs(Teacher& teacher, double& seconds) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<SeedRun> runs;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SeedRun r;
    auto base = student_config(seed, Mode::CrossArch);
    Splits splits = load_splits(base, false);
    auto train = [&](RunConfig cfg) {
      auto t = std::make_unique<Trainer>(cfg, splits.train, nullptr, &teacher);
      t->run();
      return t;
    };
    auto noisy_drop = [&](Student& s, const NoisyEvalConfig& n) {
      return evaluate(s, splits.val).top1 - evaluate(s, splits.val, true, n, seed).top1;
    };

    auto cross = train(base);
    r.cross = evaluate(cross->student(), splits.val).top1;
    r.cross_drop = noisy_drop(cross->student(), base.noisy);
    r.cos_cross = transferability(cross->student(), teacher, splits.val).mean_cosine;

    auto only = train(student_config(seed, Mode::StudentOnly));
    r.student_only = evaluate(only->student(), splits.val).top1;
    r.cos_student = transferability(only->student(), teacher, splits.val).mean_cosine;

    r.logits = evaluate(train(student_config(seed, Mode::LogitsBaseline))->student(), splits.val).top1;

    auto plain_cfg = base;
    plain_cfg.mvg.enabled = false;
    plain_cfg.train.lambda = 0.0;
    plain_cfg.finalize();
    auto plain = train(plain_cfg);
    r.plain_cross = evaluate(plain->student(), splits.val).top1;
    r.plain_drop = noisy_drop(plain->student(), base.noisy);

    std::printf("  seed %llu: cross %.4f student-only %.4f logits %.4f | drop robust %.4f plain %.4f | cos %.4f vs %.4f\n",
                static_cast<unsigned long long>(seed), r.cross, r.student_only, r.logits, r.cross_drop, r.plain_drop,
                r.cos_cross, r.cos_student);
    std::fflush(stdout);
    runs.push_back(r);
  }
  seconds = seconds_since(t0);
  return runs;
}

double mean_of(const std::vector<SeedRun>& runs, double SeedRun::*field) {
  double s = 0;
  for (const auto& r : runs) s += r.*field;
  return s / static_cast<double>(runs.size());
}

Outcome determinism(const fs::path& teacher_ckpt, const fs::path& dir) {
  Outcome o;
  std::vector<std::string> csvs;
  for (const char* name : {"a", "b"}) {
    std::ostringstream out, err;
    const int code = run_cli({"distill", "--teacher", teacher_ckpt.string(), "--seed", "11", "--out",
                              (dir / name).string(), "--epochs", "3", "--set", "data.per_class=8", "--set",
                              "data.val_per_class=4", "--set", "train.batch_size=8"},
                             out, err);
    o.check(code == 0, std::string("run ") + name + " exit code: " + err.str());
    csvs.push_back(slurp(dir / name / "metrics.csv"));
  }
  o.check(!csvs[0].empty() && csvs[0] == csvs[1], "metrics.csv bitwise identical");
  o.note(std::to_string(csvs[0].size()) + " bytes");
  return o;
}

}  // namespace

int main() {
  std::vector<std::pair<std::string, Outcome>> results;
  auto record = [&](const std::string& name, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o.check(false, e.what());
    }
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    results.emplace_back(name, o);
  };

  record("1 gradient suite", gradient_suite);
  record("2 analytic fixed points", fixed_points);
  record("3 small-instance oracles", oracles);
  record("4 discriminator schedule and export", schedule);

  const fs::path dir = fs::temp_directory_path() / "crosskd_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  std::vector<SeedRun> runs;
  double directional_seconds = 0;
  std::string setup_error;
  try {
    RunConfig tcfg;
    tcfg.seed = 0;
    tcfg.mode = Mode::TeacherPretrain;
    tcfg.data.teacher_per_class = 750;
    tcfg.finalize();
    const auto t0 = std::chrono::steady_clock::now();
    Splits pool = load_splits(tcfg, true);
    Teacher teacher = pretrain_teacher(tcfg, pool.train, nullptr);
    std::printf("  teacher: val top-1 %.4f, %.1f s\n", evaluate(teacher, pool.val).top1, seconds_since(t0));
    save_checkpoint(dir / "teacher.ckpt", teacher_checkpoint(teacher));
    runs = directional_runs(teacher, directional_seconds);
  } catch (const std::exception& e) {
    setup_error = e.what();
  }

  auto directional = [&](const std::function<Outcome()>& f) {
    return [&, f] {
      Outcome o;
      if (!setup_error.empty()) o.check(false, setup_error);
      else o = f();
      return o;
    };
  };

  record("5 distillation gain", directional([&] {
           Outcome o;
           const double c = mean_of(runs, &SeedRun::cross), s = mean_of(runs, &SeedRun::student_only),
                        l = mean_of(runs, &SeedRun::logits);
           o.check(c > s, "cross-arch > student-only");
           o.check(c >= l, "cross-arch >= logits-baseline");
           o.check(directional_seconds <= 600.0, "5-seed protocol within 10 min");
           o.note("mean top-1 cross-arch " + fmt(c) + ", student-only " + fmt(s) + ", logits-baseline " + fmt(l) +
                  ", " + fmt(directional_seconds, 3) + " s");
           return o;
         }));
  record("6 transferability direction", directional([&] {
           Outcome o;
           const double c = mean_of(runs, &SeedRun::cos_cross), s = mean_of(runs, &SeedRun::cos_student);
           o.check(c > s, "distilled cosine > undistilled cosine");
           o.note("mean cosine distilled " + fmt(c) + ", undistilled " + fmt(s));
           return o;
         }));
  record("7 robustness direction", directional([&] {
           Outcome o;
           const double r = mean_of(runs, &SeedRun::cross_drop), p = mean_of(runs, &SeedRun::plain_drop);
           o.check(r <= p, "drop with robust training <= drop without");
           o.note("mean drop robust " + fmt(r) + ", without " + fmt(p) + " (clean " +
                  fmt(mean_of(runs, &SeedRun::cross)) + " vs " + fmt(mean_of(runs, &SeedRun::plain_cross)) + ")");
           return o;
         }));
  record("8 determinism", [&] {
    if (!setup_error.empty()) {
      Outcome o;
      o.check(false, setup_error);
      return o;
    }
    return determinism(dir / "teacher.ckpt", dir);
  });

  std::size_t failed = 0;
  for (const auto& [name, o] : results) failed += o.pass ? 0 : 1;
  std::printf("%zu/%zu criteria passed\n", results.size() - failed, results.size());
  return failed == 0 ? 0 : 1;
}
