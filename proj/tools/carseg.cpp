// carseg: command-line front end.
//
//   carseg run  --image a.png --queries "cat,dog" --backend toy:seed=7 --out out/
//   carseg run  --manifest m.jsonl --backend remote:127.0.0.1:9090 --sam-proposals props/
//   carseg eval --manifest m.jsonl --pred out/
//   carseg prompts-demo --image a.png --mask m.png --prompts circle,blur --out demo/
//   carseg backend-check --backend toy
//
// Exit codes: 0 ok, 1 unexpected failure, 2 configuration or usage error,
// 3 backend error, 4 I/O error.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "carseg/background.hpp"
#include "carseg/config.hpp"
#include "carseg/eval.hpp"
#include "carseg/image_io.hpp"
#include "carseg/pipeline.hpp"
#include "carseg/prompter.hpp"
#include "carseg/toy_backend.hpp"

namespace fs = std::filesystem;
using namespace carseg;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitBackend = 3;
constexpr int kExitIo = 4;

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const size_t a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

std::string default_backend() {
  const char* env = std::getenv("CAR_BACKEND");
  return env && *env ? env : "toy";
}

struct ConfigFlags {
  std::string config_path;
  std::string bg_set;
  std::optional<double> eta, theta, lambda;
  std::string prompts;
  bool crf = false, no_crf = false;
};

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.config_path, "Configuration file")->check(CLI::ExistingFile);
  app->add_option("--bg-set", f.bg_set, "Background queries: none, terrestrial, aquatic, manmade or all");
  app->add_option("--eta", f.eta, "Mask binarisation threshold");
  app->add_option("--theta", f.theta, "Query filter threshold");
  app->add_option("--lambda", f.lambda, "CAM box threshold");
  app->add_option("--prompts", f.prompts, "Visual prompt types, e.g. circle,blur");
  auto* on = app->add_flag("--crf", f.crf, "Enable CRF refinement");
  app->add_flag("--no-crf", f.no_crf, "Disable CRF refinement")->excludes(on);
}

PipelineConfig resolve_config(const ConfigFlags& f) {
  PipelineConfig cfg = f.config_path.empty() ? PipelineConfig::defaults() : load_config(f.config_path);
  if (!f.bg_set.empty()) cfg.bg_queries = background_queries(parse_bg_set(f.bg_set));
  if (f.eta) cfg.eta = *f.eta;
  if (f.theta) cfg.theta = *f.theta;
  if (f.lambda) cfg.lambda = *f.lambda;
  if (!f.prompts.empty()) cfg.prompt.types = parse_prompt_types(f.prompts);
  if (f.crf) cfg.crf_enabled = true;
  if (f.no_crf) cfg.crf_enabled = false;
  require_valid_config(cfg);
  return cfg;
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct RunFlags {
  ConfigFlags cfg;
  std::vector<std::string> images;
  std::string manifest;
  std::string queries;
  std::string backend;
  std::string sam_dir;
  bool dump_prompts = false;
  bool trace = false;
  bool save_soft = false;
  std::string out = ".";
  int jobs = 1;
};

struct Job {
  fs::path image;
  std::vector<std::string> queries;
};

nlohmann::json result_json(const Job& job, const SegResult& r, const PipelineConfig& cfg, const Backend& backend) {
  nlohmann::json surviving = nlohmann::json::array();
  for (const Query& q : r.surviving_queries.entries()) surviving.push_back({{"index", q.original_index}, {"text", q.text}});
  nlohmann::json areas = nlohmann::json::object();
  for (size_t i = 0; i < job.queries.size(); ++i) {
    long n = 0;
    for (const int32_t l : r.label_map.values()) n += l == static_cast<int32_t>(i);
    areas[job.queries[i]] = n;
  }
  return {{"image", job.image.filename().string()},
          {"width", r.label_map.width()},
          {"height", r.label_map.height()},
          {"queries", job.queries},
          {"surviving", surviving},
          {"steps", r.steps},
          {"label_areas", areas},
          {"backend", backend.describe()},
          {"config", config_fingerprint(cfg)}};
}

void run_one(Backend& backend, const Job& job, const PipelineConfig& cfg, const RunFlags& f) {
  const ImageBuf image = read_png(job.image);
  ProposalSet proposals;
  const std::string stem = job.image.stem().string();
  if (!f.sam_dir.empty()) proposals = load_proposals_for(f.sam_dir, stem);
  for (const BinMask& m : proposals.masks)
    if (m.width() != image.width() || m.height() != image.height())
      throw IoError("proposal mask for " + stem + " does not match the image size");
  SegmentOptions opts;
  opts.proposals = &proposals;
  opts.keep_prompts = f.dump_prompts;
  const SegmentOutput out = segment(backend, image, job.queries, cfg, opts);

  const fs::path dir(f.out);
  write_label_png(dir / (stem + "_labels.png"), out.result.label_map);
  write_png(dir / (stem + "_overlay.png"), render_overlay(image, out.result.label_map));
  const std::string js = result_json(job, out.result, cfg, backend).dump(2) + "\n";
  write_file(dir / (stem + "_result.json"), std::span(reinterpret_cast<const uint8_t*>(js.data()), js.size()));
  if (f.trace) {
    const std::string t = trace_to_jsonl(out.trace);
    write_file(dir / (stem + "_trace.jsonl"), std::span(reinterpret_cast<const uint8_t*>(t.data()), t.size()));
  }
  if (f.save_soft) {
    const std::vector<int> ids = out.result.surviving_queries.original_indices();
    for (size_t i = 0; i < ids.size(); ++i)
      write_png_gray(dir / (stem + "_soft_" + std::to_string(ids[i]) + ".png"),
                     soft_mask_to_gray(out.result.soft_masks[i]));
  }
  if (f.dump_prompts) {
    for (size_t t = 0; t < out.prompted.size(); ++t) {
      const std::vector<Query>& in = out.trace[t].queries_in;
      for (size_t i = 0; i < out.prompted[t].size(); ++i) {
        if (out.prompted[t][i].empty()) continue;
        write_png(dir / (stem + "_prompt_t" + std::to_string(t + 1) + "_q" + std::to_string(in[i].original_index) + ".png"),
                  out.prompted[t][i]);
      }
    }
  }
}

std::vector<Job> collect_jobs(const RunFlags& f) {
  std::vector<Job> jobs;
  const std::vector<std::string> queries = split_csv(f.queries);
  if (!f.manifest.empty()) {
    for (ManifestEntry& e : load_manifest(f.manifest))
      jobs.push_back({e.image, queries.empty() ? std::move(e.queries) : queries});
  }
  for (const std::string& img : f.images) {
    if (queries.empty()) throw ConfigError("--queries is required with --image");
    jobs.push_back({img, queries});
  }
  if (jobs.empty()) throw ConfigError("nothing to do: pass --image or --manifest");
  std::set<std::string> stems;
  for (const Job& j : jobs)
    if (!stems.insert(j.image.stem().string()).second)
      throw ConfigError("two inputs share the file stem '" + j.image.stem().string() + "'");
  return jobs;
}

// First error by job order, so reports do not depend on scheduling.
struct JobError {
  size_t index = 0;
  std::exception_ptr error;
};

int cmd_run(const RunFlags& f) {
  const PipelineConfig cfg = resolve_config(f.cfg);
  const std::vector<Job> jobs = collect_jobs(f);
  const std::string descriptor = f.backend.empty() ? default_backend() : f.backend;
  std::error_code ec;
  fs::create_directories(f.out, ec);
  if (ec) throw IoError("cannot create output directory " + f.out + ": " + ec.message());

  const int workers = std::max(1, std::min<int>(f.jobs, static_cast<int>(jobs.size())));
  std::atomic<size_t> next{0};
  std::mutex err_mutex;
  std::optional<JobError> first;
  auto worker = [&] {
    std::unique_ptr<Backend> backend;
    try {
      backend = make_backend(descriptor);
    } catch (...) {
      std::lock_guard lock(err_mutex);
      if (!first) first = JobError{0, std::current_exception()};
      return;
    }
    for (size_t i = next++; i < jobs.size(); i = next++) {
      try {
        run_one(*backend, jobs[i], cfg, f);
      } catch (...) {
        std::lock_guard lock(err_mutex);
        if (!first || i < first->index) first = JobError{i, std::current_exception()};
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first->error);
  std::cout << "segmented " << jobs.size() << " image(s) into " << f.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalFlags {
  std::string manifest;
  std::string pred;
  bool json = false;
  std::optional<int> ignore;
  std::optional<int> tol;
};

LabelMap read_labels_or_fail(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw IoError(std::string("missing ") + what + " file " + p.string());
  return read_label_png(p);
}

int cmd_eval(const EvalFlags& f) {
  const std::vector<ManifestEntry> entries = load_manifest(f.manifest);
  size_t num_classes = 0;
  for (const ManifestEntry& e : entries) num_classes = std::max(num_classes, e.queries.size());
  std::vector<std::string> names;
  if (!entries.empty()) {
    names = entries.front().queries;
    for (const ManifestEntry& e : entries)
      if (e.queries != names) names.clear();
  }
  MiouAccumulator acc(static_cast<int>(num_classes), f.ignore);
  double j_sum = 0.0, f_sum = 0.0;
  long objects = 0;
  for (const ManifestEntry& e : entries) {
    if (e.gt.empty()) throw ConfigError("manifest line " + std::to_string(e.line) + ": no 'gt' field");
    const LabelMap gt = read_labels_or_fail(e.gt, "ground-truth");
    const LabelMap pred = read_labels_or_fail(fs::path(f.pred) / (e.image.stem().string() + "_labels.png"), "prediction");
    if (!pred.same_shape(gt)) throw IoError("prediction for " + e.image.string() + " does not match its ground truth size");
    acc.add(pred, gt);
    const int tol = f.tol ? *f.tol : default_contour_tol(gt.width(), gt.height());
    for (size_t c = 0; c < e.queries.size(); ++c) {
      std::vector<uint8_t> pb(gt.size()), gb(gt.size());
      bool any = false;
      for (size_t i = 0; i < gt.size(); ++i) {
        const bool skip = f.ignore && gt[i] == *f.ignore;
        pb[i] = !skip && pred[i] == static_cast<int32_t>(c);
        gb[i] = !skip && gt[i] == static_cast<int32_t>(c);
        any = any || pb[i] || gb[i];
      }
      if (!any) continue;
      const BinMask pm(gt.width(), gt.height(), std::move(pb)), gm(gt.width(), gt.height(), std::move(gb));
      j_sum += region_j(pm, gm);
      f_sum += contour_f(pm, gm, tol);
      ++objects;
    }
  }
  MetricReport report = make_report(acc);
  if (objects > 0) {
    report.j_mean = j_sum / static_cast<double>(objects);
    report.f_mean = f_sum / static_cast<double>(objects);
    report.jf_mean = (*report.j_mean + *report.f_mean) / 2.0;
  }
  std::cout << (f.json ? report_to_json(report, names) + "\n" : report_to_table(report, names));
  return 0;
}

// ---------------------------------------------------------------------------
// prompts-demo
// ---------------------------------------------------------------------------

struct DemoFlags {
  std::string image;
  std::string mask;
  std::string prompts = "circle,rectangle,contour,blur,gray,black";
  std::string out = ".";
  int thickness = 1;
};

int cmd_prompts_demo(const DemoFlags& f) {
  const ImageBuf image = read_png(f.image);
  const Grid<uint8_t> raw = read_png_gray(f.mask);
  if (!raw.same_shape(image.width(), image.height())) throw IoError("mask and image sizes differ");
  std::vector<uint8_t> bits(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) bits[i] = raw[i] != 0;
  const BinMask mask(raw.width(), raw.height(), std::move(bits));
  PromptSpec spec;
  spec.types = parse_prompt_types(f.prompts);
  spec.thickness = f.thickness;
  validate_prompt_spec(spec);
  std::error_code ec;
  fs::create_directories(f.out, ec);
  if (ec) throw IoError("cannot create output directory " + f.out + ": " + ec.message());
  const std::string stem = fs::path(f.image).stem().string();
  for (const PromptType t : spec.types) {
    PromptSpec one = spec;
    one.types = {t};
    write_png(fs::path(f.out) / (stem + "_" + to_string(t) + ".png"), apply_visual_prompts(image, mask, one));
  }
  write_png(fs::path(f.out) / (stem + "_combined.png"), apply_visual_prompts(image, mask, spec));
  std::cout << "wrote " << spec.types.size() + 1 << " prompt image(s) to " << f.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// backend-check
// ---------------------------------------------------------------------------

int cmd_backend_check(const std::string& descriptor_flag) {
  const std::string descriptor = descriptor_flag.empty() ? default_backend() : descriptor_flag;
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  std::unique_ptr<Backend> backend = make_backend(descriptor);
  const auto t1 = clock::now();

  const toy::World world = toy::make_world(1, {.size = 32, .planted = 2, .absent = 1, .stuff = 0});
  const std::vector<ImageBuf> images{world.image, world.image};
  const Eigen::MatrixXd logits = backend->score(images, world.queries);
  const auto t2 = clock::now();
  if (logits.rows() != 2 || logits.cols() != static_cast<Eigen::Index>(world.queries.size()) || !logits.allFinite())
    throw BackendError("score reply has the wrong shape or non-finite values");

  const std::vector<std::string> bg{"sky", "grass"};
  const CamBundle bundle = backend->activations(world.image, world.queries, bg);
  const auto t3 = clock::now();
  bundle.validate(world.queries.size() + bg.size());

  const Capabilities caps = backend->capabilities();
  auto ms = [](auto a, auto b) { return std::chrono::duration<double, std::milli>(b - a).count(); };
  std::printf("backend: %s\n", backend->describe().c_str());
  std::printf("capabilities: {%s}\n", caps.score && caps.activations ? "score, activations"
                                       : caps.score                 ? "score"
                                       : caps.activations           ? "activations"
                                                                    : "");
  std::printf("score: %dx%d logits, %.2f ms\n", static_cast<int>(logits.rows()), static_cast<int>(logits.cols()),
              ms(t1, t2));
  std::printf("activations: K=%d h=%d w=%d n_fg=%d L=%d, %.2f ms\n", bundle.channels, bundle.height, bundle.width,
              bundle.num_fg, bundle.attn_layers, ms(t2, t3));
  std::printf("connect: %.2f ms\n", ms(t0, t1));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent open-vocabulary segmentation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "carseg 0.1.0");

  RunFlags run;
  CLI::App* run_cmd = app.add_subcommand("run", "Segment images");
  add_config_flags(run_cmd, run.cfg);
  auto* image_opt = run_cmd->add_option("--image", run.images, "Input PNG (repeatable)");
  run_cmd->add_option("--manifest", run.manifest, "JSONL manifest")->excludes(image_opt);
  run_cmd->add_option("--queries", run.queries, "Comma-separated text queries");
  run_cmd->add_option("--backend", run.backend, "toy[:seed=N,grid=G,world=W,size=S] | remote:HOST:PORT | pipe:COMMAND");
  run_cmd->add_option("--sam-proposals", run.sam_dir, "Directory of proposal masks")->check(CLI::ExistingDirectory);
  run_cmd->add_flag("--dump-prompts", run.dump_prompts, "Write every prompted image");
  run_cmd->add_flag("--trace", run.trace, "Write the per-step trace as JSONL");
  run_cmd->add_flag("--save-soft", run.save_soft, "Write final soft masks as 8-bit PNGs");
  run_cmd->add_option("--out", run.out, "Output directory");
  run_cmd->add_option("--jobs", run.jobs, "Parallel images")->check(CLI::PositiveNumber);

  EvalFlags ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Score predictions against manifest ground truth");
  eval_cmd->add_option("--manifest", ev.manifest, "JSONL manifest with gt paths")->required();
  eval_cmd->add_option("--pred", ev.pred, "Directory holding <stem>_labels.png files")->required();
  eval_cmd->add_option("--ignore", ev.ignore, "Ground-truth value to skip, as stored in the PNG");
  eval_cmd->add_option("--tol", ev.tol, "Contour tolerance in pixels");
  eval_cmd->add_flag("--json", ev.json, "Print JSON instead of a table");

  DemoFlags demo;
  CLI::App* demo_cmd = app.add_subcommand("prompts-demo", "Render each visual prompt for one mask");
  demo_cmd->add_option("--image", demo.image, "Input PNG")->required();
  demo_cmd->add_option("--mask", demo.mask, "Mask PNG, nonzero is foreground")->required();
  demo_cmd->add_option("--prompts", demo.prompts, "Prompt types");
  demo_cmd->add_option("--thickness", demo.thickness, "Stroke width")->check(CLI::PositiveNumber);
  demo_cmd->add_option("--out", demo.out, "Output directory");

  std::string check_backend;
  CLI::App* check_cmd = app.add_subcommand("backend-check", "Round-trip score and activations");
  check_cmd->add_option("--backend", check_backend, "Backend descriptor");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitConfig;
  }

  if (ev.ignore && *ev.ignore == kBackgroundPng) ev.ignore = kBackground;
  try {
    if (*run_cmd) return cmd_run(run);
    if (*eval_cmd) return cmd_eval(ev);
    if (*demo_cmd) return cmd_prompts_demo(demo);
    if (*check_cmd) return cmd_backend_check(check_backend);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const InvalidArgument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kExitConfig;
  } catch (const EmptyMaskError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
