// Command-line front end: phantom, select, synthesize, train, eval, run,
// compare and params. Exit codes: 0 success, 2 configuration error, 3 stage
// failure.
#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fewseg/errors.hpp"
#include "fewseg/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fewseg;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

ModelConfig model_config(const std::string& spec) {
  if (spec == "small") return ModelConfig::small();
  if (spec == "desk") return ModelConfig::desk();
  if (spec == "toy") return ModelConfig::toy();
  if (spec == "base_like") return ModelConfig::base_like();
  return read_json(spec).get<ModelConfig>();
}

void print_record(const TrainRecord& r) {
  std::printf("step %6d  lr %.3e  loss %.5f  ce %.5f  dice %.5f", r.step, r.lr, r.loss, r.ce, r.dice);
  if (r.val_dsc) std::printf("  val_dsc %.4f", *r.val_dsc);
  std::printf("\n");
  std::fflush(stdout);
}

struct PhantomArgs {
  PhantomConfig config;
  std::string config_path;
  std::string out;
  std::uint64_t seed = 0;
};

struct SelectArgs {
  std::string data, out;
  SelectionSpec spec;
  std::uint64_t seed = 0;
};

struct SynthArgs {
  std::string exemplars, backgrounds, config, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> num_samples;
};

struct TrainArgs {
  std::string data, model = "small", train_config, out, validation;
  std::uint64_t seed = 0;
  std::optional<int> max_steps;
};

struct EvalArgs {
  std::string checkpoint, data, out, prompt = "interior", aggregation, method = "model";
  std::uint64_t seed = 0;
  int overlays = 0;
};

struct RunArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  bool no_synthesis = false;
  std::vector<int> exemplar_counts;
};

int cmd_phantom(const PhantomArgs& a) {
  PhantomConfig c = a.config;
  if (!a.config_path.empty()) {
    const json j = read_json(a.config_path);
    c.image_size = j.value("image_size", c.image_size);
    c.class_count = j.value("class_count", c.class_count);
    c.volumes = j.value("volumes", c.volumes);
    c.slices_per_volume = j.value("slices_per_volume", c.slices_per_volume);
    c.foreground_extent = j.value("foreground_extent", c.foreground_extent);
    c.min_radius = j.value("min_radius", c.min_radius);
    c.max_radius = j.value("max_radius", c.max_radius);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.style = j.value("style", c.style);
  }
  validate_phantom_config(c);
  const auto m = generate_phantom_dataset(c, a.seed, a.out);
  std::printf("wrote %zu slices (%zu volumes, %d classes) to %s\n", m.records.size(),
              m.volume_ids().size(), m.class_count, (fs::path(a.out) / "manifest.json").c_str());
  return 0;
}

int cmd_select(const SelectArgs& a) {
  const auto manifest = load_manifest(a.data);
  const auto& s = a.spec;
  ExemplarSet set;
  if (s.strategy == kStrategyRandomFraction) {
    set = select_random_fraction(manifest, s.fraction, s.min_fg_pixels, a.seed);
  } else if (s.strategy == kStrategyRandomCount) {
    set = select_random_count(manifest, s.count, s.min_fg_pixels, a.seed);
  } else if (s.strategy == kStrategyMostOrgans) {
    set = select_most_organs(manifest, s.total, s.per_volume_quota, a.seed);
  } else {
    throw ConfigError("unknown strategy '" + s.strategy + "'");
  }
  save_exemplars(set, a.out);
  std::printf("selected %zu exemplars (%s) -> %s\n", set.entries.size(), set.strategy.c_str(),
              a.out.c_str());
  return 0;
}

int cmd_synthesize(const SynthArgs& a) {
  SynthesisConfig c;
  if (!a.config.empty()) c = read_json(a.config).get<SynthesisConfig>();
  if (a.seed) c.seed = *a.seed;
  if (a.num_samples) c.num_samples = *a.num_samples;
  c.validate();
  const auto exemplars = load_exemplars(a.exemplars);
  const auto bg_manifest = load_manifest(a.backgrounds);
  const auto manifest =
      build_dataset(exemplars, collect_backgrounds(bg_manifest), c, bg_manifest.class_count, a.out);
  std::printf("synthesized %zu slices -> %s\n", manifest.records.size(),
              (fs::path(a.out) / "manifest.json").c_str());
  return 0;
}

int cmd_train(const TrainArgs& a) {
  const ModelConfig mc = model_config(a.model);
  TrainConfig tc;
  if (!a.train_config.empty()) tc = read_json(a.train_config).get<TrainConfig>();
  if (a.max_steps) tc.max_steps = *a.max_steps;
  tc.seed = derive_seed(a.seed, "training");
  tc.validate();
  mc.validate();
  const auto data = load_manifest(a.data);
  SegmentationModel model(mc, derive_seed(a.seed, "model"));
  TrainOptions opts;
  opts.out_dir = a.out;
  if (!a.validation.empty()) opts.validation = load_all_slices(load_manifest(a.validation));
  opts.on_record = print_record;
  const auto log = train(model, data, tc, opts);
  if (log.final_val_dsc) std::printf("validation DSC %.4f\n", *log.final_val_dsc);
  std::printf("checkpoint -> %s\n", (fs::path(a.out) / "checkpoint").c_str());
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  const PromptStrategy strategy = parse_prompt_strategy(a.prompt);
  std::optional<Aggregation> aggregation;
  if (!a.aggregation.empty()) aggregation = parse_aggregation(a.aggregation);
  const auto model = SegmentationModel::load(a.checkpoint);
  const auto manifest = load_manifest(a.data);
  const auto slices = load_all_slices(manifest);
  MetricsReport r = evaluate(make_predictor(model), slices, manifest.class_count, strategy, a.seed,
                             aggregation);
  r.method = a.method;
  r.seed = a.seed;
  write_report({r}, a.out);
  std::cout << report_text({r});
  if (a.overlays > 0) {
    const auto predict = make_predictor(model);
    Rng rng(a.seed);
    int written = 0;
    for (std::size_t i = 0; i < slices.size() && written < a.overlays; ++i) {
      const auto& s = slices[i];
      for (int k = 1; k <= manifest.class_count && written < a.overlays; ++k) {
        const Mask gt = class_mask(s.label, k);
        const auto prompt = make_prompt(gt, k, strategy, rng);
        if (!prompt) continue;
        char name[64];
        std::snprintf(name, sizeof name, "overlay_%04zu_c%d.ppm", i, k);
        write_overlay_ppm(s.image, gt, predict(s, *prompt), fs::path(a.out) / name);
        ++written;
      }
    }
  }
  return 0;
}

int cmd_run(const RunArgs& a) {
  ExperimentConfig c = load_experiment(a.config);
  if (!a.out.empty()) c.out_dir = a.out;
  if (a.seed) c.seed = *a.seed;
  if (a.no_synthesis) c.synthesis.reset();
  if (a.exemplar_counts.empty()) {
    const auto r = run_experiment(c);
    std::cout << report_text({r.report});
    if (r.untrained) std::cout << report_text({*r.untrained});
    std::printf("run directory %s (config %s)\n", r.run_dir.c_str(), r.config_hash.c_str());
    return 0;
  }
  // Exemplar-count sweep; a non-monotone trend is reported, not failed.
  std::vector<fs::path> dirs;
  std::vector<double> dscs;
  const fs::path base = c.out_dir;
  for (int n : a.exemplar_counts) {
    ExperimentConfig ci = c;
    ci.selection.strategy = kStrategyRandomCount;
    ci.selection.count = n;
    ci.out_dir = base / ("exemplars_" + std::to_string(n));
    ci.name = c.name + "_n" + std::to_string(n);
    const auto r = run_experiment(ci);
    dirs.push_back(r.run_dir);
    dscs.push_back(r.report.mean_dsc);
    std::printf("exemplars %3d  mean DSC %.4f\n", n, r.report.mean_dsc);
  }
  for (std::size_t i = 1; i < dscs.size(); ++i) {
    if (dscs[i] < dscs[i - 1]) {
      std::printf("warning: mean DSC decreased from %d to %d exemplars (%.4f -> %.4f)\n",
                  a.exemplar_counts[i - 1], a.exemplar_counts[i], dscs[i - 1], dscs[i]);
    }
  }
  if (dirs.size() >= 2) {
    const auto cmp = compare_runs(dirs);
    std::ofstream(base / "comparison.csv") << cmp.csv();
    std::cout << cmp.text();
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<fs::path> dirs(runs.begin(), runs.end());
  const auto cmp = compare_runs(dirs);
  std::cout << cmp.text();
  if (!out.empty()) {
    std::ofstream f(out, std::ios::trunc);
    f << cmp.csv();
    if (!f) throw IoError("cannot write " + out);
  }
  return 0;
}

int cmd_params(const std::string& model, int rank) {
  ModelConfig c = model_config(model);
  if (rank > 0) c.lora.rank = rank;
  const auto m = SegmentationModel::shapes_only(c);
  std::printf("model: input %d, patch %d, embed %d, depth %d, decoder %d, LoRA rank %d\n",
              c.input_size, c.patch_size, c.embed_dim, c.depth, c.decoder_dim, c.lora.rank);
  std::cout << format_param_count(count_parameters(m.params()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-exemplar LoRA fine-tuning of a point-promptable segmenter"};
  app.require_subcommand(1);

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  phantom->add_option("--out", ph.out, "Output directory")->required();
  phantom->add_option("--seed", ph.seed, "Random seed");
  phantom->add_option("--config", ph.config_path, "Phantom config JSON (fields as below)");
  phantom->add_option("--image-size", ph.config.image_size, "Slice side length in pixels");
  phantom->add_option("--classes", ph.config.class_count, "Foreground classes");
  phantom->add_option("--volumes", ph.config.volumes, "Number of volumes");
  phantom->add_option("--slices", ph.config.slices_per_volume, "Slices per volume");
  phantom->add_option("--foreground-extent", ph.config.foreground_extent,
                      "Fraction of slices that may contain foreground");
  phantom->add_option("--min-radius", ph.config.min_radius, "Smallest organ radius (px)");
  phantom->add_option("--max-radius", ph.config.max_radius, "Largest organ radius (px)");
  phantom->add_option("--noise", ph.config.noise_std, "Texture noise standard deviation");
  phantom->add_option("--style", ph.config.style, "mri or ct")->check(CLI::IsMember({"mri", "ct"}));

  SelectArgs sel;
  auto* select = app.add_subcommand("select", "Select exemplars from a training manifest");
  select->add_option("--data", sel.data, "Training manifest")->required();
  select->add_option("--out", sel.out, "Exemplar list JSON")->required();
  select->add_option("--strategy", sel.spec.strategy, "random_fraction, random_count or most_organs")
      ->check(CLI::IsMember({kStrategyRandomFraction, kStrategyRandomCount, kStrategyMostOrgans}));
  select->add_option("--fraction", sel.spec.fraction, "Fraction of the eligible pool");
  select->add_option("--count", sel.spec.count, "Exemplar count (random_count)");
  select->add_option("--total", sel.spec.total, "Total exemplars (most_organs)");
  select->add_option("--per-volume-quota", sel.spec.per_volume_quota, "Slices per chosen volume");
  select->add_option("--min-fg-pixels", sel.spec.min_fg_pixels, "Eligibility threshold");
  select->add_option("--seed", sel.seed, "Random seed");

  SynthArgs syn;
  auto* synth = app.add_subcommand("synthesize", "Build a synthesized training set");
  synth->add_option("--exemplars", syn.exemplars, "Exemplar list JSON")->required();
  synth->add_option("--backgrounds", syn.backgrounds, "Manifest to draw background slices from")
      ->required();
  synth->add_option("--config", syn.config, "Synthesis config JSON");
  synth->add_option("--out", syn.out, "Output directory")->required();
  synth->add_option("--seed", syn.seed, "Overrides the config seed");
  synth->add_option("--num-samples", syn.num_samples, "Overrides num_samples");

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "Fine-tune the trainable groups");
  trn->add_option("--data", tr.data, "Training manifest")->required();
  trn->add_option("--model", tr.model, "Model config JSON or preset (small, desk, toy)");
  trn->add_option("--train", tr.train_config, "Train config JSON");
  trn->add_option("--out", tr.out, "Output directory")->required();
  trn->add_option("--seed", tr.seed, "Seed for weights and batches");
  trn->add_option("--max-steps", tr.max_steps, "Overrides max_steps");
  trn->add_option("--validation", tr.validation, "Manifest scored during training");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--data", ev.data, "Test manifest")->required();
  eval->add_option("--out", ev.out, "Report directory")->required();
  eval->add_option("--prompt", ev.prompt, "interior or random")
      ->check(CLI::IsMember({"interior", "random"}));
  eval->add_option("--aggregation", ev.aggregation, "per-slice or per-volume")
      ->check(CLI::IsMember({"per-slice", "per-volume"}));
  eval->add_option("--method", ev.method, "Method label in the report");
  eval->add_option("--seed", ev.seed, "Seed for random prompts");
  eval->add_option("--overlays", ev.overlays, "Write this many PPM contour overlays");

  RunArgs rn;
  auto* run = app.add_subcommand("run", "Run a full experiment");
  run->add_option("--config", rn.config, "Experiment config JSON")->required();
  run->add_option("--out", rn.out, "Overrides out_dir");
  run->add_option("--seed", rn.seed, "Overrides the global seed");
  run->add_flag("--no-synthesis", rn.no_synthesis, "Train on the exemplars directly");
  run->add_option("--exemplar-counts", rn.exemplar_counts, "Sweep over exemplar counts")
      ->delimiter(',');

  std::vector<std::string> cmp_runs;
  std::string cmp_out;
  auto* compare = app.add_subcommand("compare", "Compare run directories");
  compare->add_option("runs", cmp_runs, "Run directories (first is the reference)")
      ->required()
      ->expected(2, -1);
  compare->add_option("--out", cmp_out, "Write the long-format comparison CSV here");

  std::string pm_model = "base_like";
  int pm_rank = 0;
  auto* params = app.add_subcommand("params", "Print trainable-parameter accounting");
  params->add_option("--model", pm_model, "Model config JSON or preset");
  params->add_option("--rank", pm_rank, "Overrides the LoRA rank");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*phantom) return cmd_phantom(ph);
    if (*select) return cmd_select(sel);
    if (*synth) return cmd_synthesize(syn);
    if (*trn) return cmd_train(tr);
    if (*eval) return cmd_eval(ev);
    if (*run) return cmd_run(rn);
    if (*compare) return cmd_compare(cmp_runs, cmp_out);
    if (*params) return cmd_params(pm_model, pm_rank);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitStage;
  }
  return kExitConfig;
}
