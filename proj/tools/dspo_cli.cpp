#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>

#include "dspo/annotation_server.hpp"
#include "dspo/pipeline.hpp"

namespace {

struct Common {
  std::string config;
  std::string run_root;
  std::string run_name;
  bool force = false;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "pipeline configuration (JSON)");
  sub->add_option("--run-root", c.run_root, "root of run directories (default $DSPO_RUN_DIR or ./runs)");
  sub->add_option("--run-name", c.run_name, "overrides run_name from the configuration");
  sub->add_flag("--force", c.force, "recompute even when outputs are up to date");
}

dspo::Pipeline make_pipeline(const Common& c, const std::function<void(dspo::PipelineConfig&)>& overrides = {}) {
  dspo::PipelineConfig cfg = c.config.empty() ? dspo::PipelineConfig() : dspo::load_pipeline_config(c.config);
  if (!c.run_name.empty()) cfg.run_name = c.run_name;
  if (c.seed) cfg.seed = *c.seed;
  if (overrides) overrides(cfg);
  std::string root = c.run_root;
  if (root.empty()) {
    const char* env = std::getenv("DSPO_RUN_DIR");
    root = env && *env ? env : "runs";
  }
  return dspo::Pipeline(std::move(cfg), root);
}

void report(const dspo::StageResult& r) {
  std::cout << r.stage << (r.skipped ? ": up to date " : ": done ") << r.dir.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance-level preference alignment for diffusion super-resolution"};
  app.require_subcommand(1);
  Common common;
  dspo::StageOptions opts;

  auto simple = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, common);
    return sub;
  };

  // synth: toy corpus generator
  std::string synth_out;
  int synth_count = 16, synth_size = 64;
  std::uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "write a synthetic image corpus");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--count", synth_count, "number of images")->check(CLI::PositiveNumber);
  synth->add_option("--size", synth_size, "image extent")->check(CLI::Range(8, 4096));
  synth->add_option("--seed", synth_seed, "corpus seed");

  auto* degrade = simple("degrade", "crop and degrade source images into HQ/LQ pairs");
  std::string source, holdout;
  degrade->add_option("--source", source, "training image directory");
  degrade->add_option("--holdout", holdout, "held-out image directory");

  auto* pretrain = simple("pretrain", "train the base denoiser on the synthesized pairs");
  simple("candidates", "generate N candidates per LQ");
  simple("segment", "segment GT images into instance partitions");
  simple("score", "score candidates per instance and create annotation tasks");
  simple("select", "pick best/worst per instance and write preference records");

  auto* serve = app.add_subcommand("serve", "serve the annotation API");
  std::string host = "127.0.0.1", data_dir;
  int port = 8080;
  add_common(serve, common);
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port")->check(CLI::Range(0, 65535));
  serve->add_option("--data-dir", data_dir, "annotation directory (default <run>/score/annotation)");

  auto* export_human = simple("export-human", "export majority-vote human preference records");
  std::string ann_dir;
  export_human->add_option("--data-dir", ann_dir, "annotation directory");

  auto* finetune = simple("finetune", "fine-tune the pretrained model on preference records");
  std::string method_name, records = "auto";
  std::optional<double> lr, beta;
  std::optional<int> batch;
  std::optional<long> max_steps;
  std::optional<std::uint64_t> train_seed;
  finetune->add_option("--method", method_name, "dspo | diffusion-dpo | sft");
  finetune->add_option("--records", records, "auto | human | PATH");
  finetune->add_option("--lr", lr, "learning rate");
  finetune->add_option("--batch", batch, "batch size");
  finetune->add_option("--beta", beta, "preference temperature");
  finetune->add_option("--max-steps", max_steps, "optimizer steps");
  finetune->add_option("--seed", train_seed, "training seed");
  pretrain->add_option("--max-steps", max_steps, "optimizer steps");
  pretrain->add_option("--lr", lr, "learning rate");

  auto* evaluate = simple("evaluate", "compare a fine-tuned model with the pretrained one on held-out LQs");
  std::optional<int> rounds;
  std::string judge = "auto", choices;
  evaluate->add_option("--method", method_name, "which fine-tuned model");
  evaluate->add_option("--rounds", rounds, "sampling rounds")->check(CLI::PositiveNumber);
  evaluate->add_option("--judge", judge, "auto | human-records")->check(CLI::IsMember({"auto", "human-records"}));
  evaluate->add_option("--choices", choices, "human choices JSONL for --judge human-records");

  simple("report", "collect metrics and win rates into a report");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      for (const auto& p : dspo::make_toy_corpus(synth_out, synth_count, synth_size, synth_seed))
        std::cout << p.string() << "\n";
      return 0;
    }
    auto* sub = app.get_subcommands().front();
    const std::string stage = sub->get_name();
    opts.force = common.force;
    if (!source.empty()) opts.source_dir = source;
    if (!holdout.empty()) opts.holdout_dir = holdout;
    if (!method_name.empty()) opts.method = dspo::parse_method(method_name);
    opts.records = records;
    opts.judge = judge;
    if (!choices.empty()) opts.choices = choices;
    if (!ann_dir.empty()) opts.annotation_dir = ann_dir;

    auto pipeline = make_pipeline(common, [&](dspo::PipelineConfig& cfg) {
      dspo::TrainConfig& t = stage == "pretrain" ? cfg.pretrain : cfg.finetune;
      if (lr) t.learning_rate = *lr;
      if (batch) t.batch_size = *batch;
      if (beta) t.beta = *beta;
      if (max_steps) t.max_steps = *max_steps;
      if (train_seed) t.seed = *train_seed;
      if (rounds) cfg.evaluate.rounds = *rounds;
    });

    if (stage == "serve") {
      dspo::AnnotationStore store(data_dir.empty() ? pipeline.annotation_dir() : dspo::fs::path(data_dir));
      dspo::AnnotationServer server(store);
      std::cout << "serving " << store.dir().string() << " on http://" << host << ":" << port << "\n" << std::flush;
      if (!server.listen(host, port)) throw dspo::IoError("cannot listen on " + host + ":" + std::to_string(port));
      return 0;
    }
    report(pipeline.run(stage, opts));
    return 0;
  } catch (const dspo::InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
