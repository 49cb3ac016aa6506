#include "oneref/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "oneref/data.hpp"
#include "oneref/error.hpp"
#include "oneref/train.hpp"

namespace oneref {

namespace {

Box parse_box_flag(const std::string& s) {
  Box b;
  if (std::sscanf(s.c_str(), "%lf,%lf,%lf,%lf", &b.x_c, &b.y_c, &b.w_r, &b.h_r) != 4)
    throw CLI::ValidationError("--box", "expected \"x,y,w,h\"");
  return b;
}

std::pair<uint32_t, uint32_t> parse_grid_flag(const std::string& s) {
  unsigned h = 0, w = 0;
  if (std::sscanf(s.c_str(), "%ux%u", &h, &w) != 2 || h == 0 || w == 0)
    throw CLI::ValidationError("--grid", "expected \"HxW\"");
  return {h, w};
}

// Grid-cell visualization: masked cells dark, kept cells light, 8 px blocks.
void write_mask_ppm(const MaskPlan& plan, const std::string& path) {
  const int cell = 8;
  ImageU8 img(plan.grid_h * cell, plan.grid_w * cell);
  for (uint32_t r = 0; r < plan.grid_h; ++r)
    for (uint32_t c = 0; c < plan.grid_w; ++c) {
      const uint8_t v = plan.at(r, c) ? 51 : 230;
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x) {
          const size_t base = ((size_t(r) * cell + y) * img.w + size_t(c) * cell + x) * 3;
          img.pix[base] = img.pix[base + 1] = img.pix[base + 2] = v;
        }
    }
  write_ppm(img, path);
}

int run_gen_data(uint64_t seed, uint32_t n, const std::string& out_dir) {
  SceneSpec spec;
  spec.seed = seed;
  generate_corpus(spec, n, {0.8, 0.1, 0.1}, out_dir);
  return 0;
}

int run_mask_demo(const std::string& strategy, const std::string& box_str,
                  const std::string& grid_str, uint64_t seed, const std::string& out_path) {
  const auto [gh, gw] = parse_grid_flag(grid_str);
  const uint32_t patch = 16;
  const PatchGrid grid(gh * patch, gw * patch, patch);
  MaskingConfig cfg;
  cfg.seed = seed;
  Rng rng(seed);
  MaskPlan plan;
  if (strategy == "referring") {
    const Box box = parse_box_flag(box_str);
    const PatchRegion region = box_to_patch_region(box, grid, cfg.margin);
    plan = referring_dynamic_mask(grid, region, cfg, rng);
  } else if (strategy == "random") {
    plan = random_mask(grid.num_patches(), 0.4, rng);
    plan.grid_h = gh;
    plan.grid_w = gw;
  } else if (strategy == "block") {
    plan = blockwise_mask(grid, 0.4, cfg.aspect_a, rng);
  } else {
    fail("ParseError", "unknown strategy: " + strategy);
  }
  if (!out_path.empty()) write_mask_ppm(plan, out_path);
  std::cout << plan.serialize() << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Referring-aware masked vision-language pretraining kit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic referring corpus");
  uint64_t gen_seed = 0;
  uint32_t gen_n = 0;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "RNG seed")->required();
  gen->add_option("--n", gen_n, "Number of samples")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();

  // warmup
  auto* warm = app.add_subcommand("warmup", "Contrastive teacher warmup");
  std::string warm_cfg, warm_data, warm_out;
  warm->add_option("--config", warm_cfg, "Config file")->required();
  warm->add_option("--data", warm_data, "Corpus directory")->required();
  warm->add_option("--out", warm_out, "Output checkpoint")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Mask-then-predict pretraining");
  std::string pre_cfg, pre_data, pre_teacher, pre_out;
  pre->add_option("--config", pre_cfg, "Config file")->required();
  pre->add_option("--data", pre_data, "Corpus directory")->required();
  pre->add_option("--teacher", pre_teacher, "Frozen teacher checkpoint")->required();
  pre->add_option("--out", pre_out, "Output checkpoint")->required();

  // finetune
  auto* fine = app.add_subcommand("finetune", "REC/RES transfer");
  std::string fine_task, fine_cfg, fine_data, fine_init, fine_out;
  fine->add_option("--task", fine_task, "rec or res")
      ->required()
      ->check(CLI::IsMember({"rec", "res"}));
  fine->add_option("--config", fine_cfg, "Config file")->required();
  fine->add_option("--data", fine_data, "Corpus directory")->required();
  fine->add_option("--init", fine_init, "Initial checkpoint (empty = from scratch)");
  fine->add_option("--out", fine_out, "Output checkpoint")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_task, ev_ckpt, ev_data, ev_split = "val", ev_report;
  ev->add_option("--task", ev_task, "rec or res")->required()->check(CLI::IsMember({"rec", "res"}));
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint path")->required();
  ev->add_option("--data", ev_data, "Corpus directory")->required();
  ev->add_option("--split", ev_split, "val or test")->check(CLI::IsMember({"val", "test"}));
  ev->add_option("--report", ev_report, "Report output path")->required();

  // mask-demo
  auto* demo = app.add_subcommand("mask-demo", "Visualize a mask plan as PPM");
  std::string demo_strategy, demo_box = "0.5,0.5,0.5,0.5", demo_grid = "24x24", demo_out;
  uint64_t demo_seed = 0;
  demo->add_option("--strategy", demo_strategy, "random, block or referring")
      ->required()
      ->check(CLI::IsMember({"random", "block", "referring"}));
  demo->add_option("--box", demo_box, "Referred box \"x,y,w,h\" (normalized center format)");
  demo->add_option("--grid", demo_grid, "Grid \"HxW\" in patches");
  demo->add_option("--seed", demo_seed, "RNG seed");
  demo->add_option("--out", demo_out, "Output PPM path");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference gradient report");
  std::string gc_cfg, gc_report;
  gc->add_option("--config", gc_cfg, "Config file");
  gc->add_option("--report", gc_report, "Report output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "oneref-kit: error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_seed, gen_n, gen_out);

    if (warm->parsed()) {
      const TrainConfig cfg = TrainConfig::load(warm_cfg);
      const Corpus corpus = Corpus::load(warm_data, cfg.model.max_text_len);
      warmup_teacher(cfg, corpus, warm_out, warm_out + ".log.csv");
      return 0;
    }
    if (pre->parsed()) {
      const TrainConfig cfg = TrainConfig::load(pre_cfg);
      const Corpus corpus = Corpus::load(pre_data, cfg.model.max_text_len);
      pretrain_mrefm(cfg, corpus, pre_teacher, pre_out, pre_out + ".log.csv");
      return 0;
    }
    if (fine->parsed()) {
      const TrainConfig cfg = TrainConfig::load(fine_cfg);
      const Corpus corpus = Corpus::load(fine_data, cfg.model.max_text_len);
      finetune(cfg, corpus, fine_task, fine_init, fine_out, fine_out + ".log.csv");
      return 0;
    }
    if (ev->parsed()) {
      const ModelConfig mc = ModelConfig::parse(read_checkpoint_header(ev_ckpt));
      const Corpus corpus = Corpus::load(ev_data, mc.max_text_len);
      const auto& split = ev_split == "val" ? corpus.val : corpus.test;
      const EvalReport report = evaluate_checkpoint(ev_ckpt, corpus, split, ev_task, 32);
      report.save(ev_report);
      std::cout << report.serialize();
      return 0;
    }
    if (demo->parsed())
      return run_mask_demo(demo_strategy, demo_box, demo_grid, demo_seed, demo_out);

    if (gc->parsed()) {
      TrainConfig cfg;
      if (!gc_cfg.empty()) cfg = TrainConfig::load(gc_cfg);
      const GradCheckReport report = grad_check(cfg);
      std::ofstream os(gc_report);
      if (!os) fail("IoError", "cannot write report " + gc_report);
      os << report.serialize();
      std::cout << "worst_rel_err=" << report.worst_rel_err() << " over "
                << report.n_params << " params\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "oneref-kit: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace oneref
