#include "hseg/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hseg/error.hpp"
#include "hseg/fileio.hpp"
#include "hseg/metrics.hpp"
#include "hseg/nets.hpp"
#include "hseg/phantom.hpp"
#include "hseg/pipeline.hpp"
#include "hseg/postprocess.hpp"
#include "hseg/train.hpp"

namespace hseg::cli {

namespace fs = std::filesystem;

namespace {

struct TrainFlags {
  std::string corpus;
  std::string out;
  std::string loss_csv;
  std::string config;
  std::string variant = "dual";
  int iterations = 0;
  int batch = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  int validate_every = 0;
  int patch_size = 0;
  double rotation = 0.0;
  int jobs = 1;
  bool verbose = false;
};

struct Options {
  // phantom
  std::string corpus_out;
  int cases = 0;
  std::uint64_t seed = 0;
  std::vector<int> split;
  std::vector<int> dims;
  std::vector<int> lesion_range;
  double noise = -1.0;
  // training
  TrainFlags tl, td;
  // inference and evaluation
  std::string case_dir, corpus, split_name = "test";
  std::string liver_net, detect_net, variant = "dual";
  std::string out, prob_out, out_dir, svg, sizes_csv;
  std::string pred, ref;
  double threshold = 0.5;
  int jobs = 1;
};

void add_train_flags(CLI::App* c, TrainFlags& f, bool detect) {
  c->add_option("--corpus", f.corpus, "Corpus directory with manifest.tsv")->required()->check(CLI::ExistingDirectory);
  c->add_option("--out", f.out, "Checkpoint path")->required();
  c->add_option("--loss-csv", f.loss_csv, "Loss history CSV (default: <out>.loss.csv)");
  c->add_option("--config", f.config, "key = value training config; flags take precedence")->check(CLI::ExistingFile);
  c->add_option("--iters", f.iterations, "Training iterations");
  c->add_option("--batch", f.batch, "Mini-batch size");
  c->add_option("--lr", f.lr, "Adam learning rate");
  c->add_option("--seed", f.seed, "Random seed");
  c->add_option("--validate-every", f.validate_every, "Validation interval in iterations");
  c->add_option("--jobs", f.jobs, "Worker threads")->check(CLI::PositiveNumber);
  c->add_flag("--verbose", f.verbose, "Print progress every 100 iterations");
  if (detect) {
    c->add_option("--variant", f.variant, "dual | single-dce | single-concat");
    c->add_option("--patch-size", f.patch_size, "Patch edge length in pixels");
    c->add_option("--rotation", f.rotation, "Rotation augmentation range in degrees");
  }
}

train::TrainConfig resolve_train_config(const CLI::App* c, const TrainFlags& f, train::TrainConfig cfg) {
  if (!f.config.empty()) cfg = train::parse_train_config(read_text_file(f.config), cfg);
  if (c->count("--iters")) cfg.iterations = f.iterations;
  if (c->count("--batch")) cfg.batch_size = f.batch;
  if (c->count("--lr")) cfg.learning_rate = f.lr;
  if (c->count("--seed")) cfg.seed = f.seed;
  if (c->count("--validate-every")) cfg.validate_every = f.validate_every;
  if (c->count("--jobs")) cfg.jobs = f.jobs;
  if (c->get_option_no_throw("--patch-size") && c->count("--patch-size")) cfg.patch_size = f.patch_size;
  if (c->get_option_no_throw("--rotation") && c->count("--rotation")) cfg.rotation_deg = f.rotation;
  cfg.validate();
  return cfg;
}

nets::DetectVariant parse_variant(const std::string& s) {
  try {
    return nets::parse_detect_variant(s);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

void write_or_print(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
  } else {
    write_text_atomic(path, text);
  }
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int cmd_phantom(const Options& o, std::ostream& out) {
  phantom::PhantomConfig cfg;
  if (!o.dims.empty()) cfg.dims = {o.dims[0], o.dims[1], o.dims[2]};
  if (!o.lesion_range.empty()) {
    cfg.lesions_min = o.lesion_range[0];
    cfg.lesions_max = o.lesion_range[1];
  }
  if (o.noise >= 0.0) cfg.noise_sigma = o.noise;
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  phantom::CorpusSplit split = phantom::default_split(o.cases);
  if (!o.split.empty()) {
    split = {o.split[0], o.split[1], o.split[2]};
    if (split.total() != o.cases) {
      throw UsageError("--split counts sum to " + std::to_string(split.total()) + " but --cases is " +
                       std::to_string(o.cases));
    }
  }
  const auto entries = phantom::generate_corpus(o.corpus_out, cfg, o.seed, split, o.jobs);
  out << "wrote " << entries.size() << " cases to " << o.corpus_out << "\n";
  return kOk;
}

int cmd_train(const CLI::App* c, const TrainFlags& f, bool detect, std::ostream& out, std::ostream& err) {
  const nets::DetectVariant variant = detect ? parse_variant(f.variant) : nets::DetectVariant::kDual;
  const train::TrainConfig cfg =
      resolve_train_config(c, f, detect ? train::detect_defaults() : train::liver_defaults());
  const auto train_cases = pipeline::load_split(f.corpus, "train");
  const auto val_cases = pipeline::load_split(f.corpus, "val");
  if (train_cases.empty()) throw DataError("corpus " + f.corpus + " has no train cases");

  train::TrainHooks hooks;
  if (f.verbose) {
    hooks.progress = [&err, &cfg](const train::LossRecord& r) {
      if (r.iteration % 100 == 0 || r.iteration == cfg.iterations) {
        err << "iteration " << r.iteration << " loss " << r.train_loss;
        if (r.val_loss) err << " val " << *r.val_loss;
        err << "\n";
      }
    };
  }
  train::TrainResult res;
  if (detect) {
    const auto tr = pipeline::detect_training_cases(train_cases, variant);
    const auto va = pipeline::detect_training_cases(val_cases, variant);
    res = train::train_detect(tr, va, cfg, variant, hooks);
  } else {
    const auto tr = pipeline::liver_training_cases(train_cases);
    const auto va = pipeline::liver_training_cases(val_cases);
    res = train::train_liver(tr, va, cfg, hooks);
  }
  nets::save_checkpoint(f.out, res.params, &res.optimizer);
  const std::string loss_csv = f.loss_csv.empty() ? f.out + ".loss.csv" : f.loss_csv;
  write_text_atomic(loss_csv, train::format_loss_csv(res.history));
  out << "final loss " << res.history.back().train_loss << "; wrote " << f.out << " and " << loss_csv << "\n";
  return kOk;
}

nets::Network load_net(const std::string& path, const nets::NetworkSpec& spec) {
  return nets::Network(spec, nets::load_checkpoint(path, spec).params);
}

int cmd_segment(const Options& o, std::ostream& out) {
  const nets::Network net = load_net(o.liver_net, nets::build_liver_net());
  const auto c = pipeline::load_case(o.case_dir, false);
  const Volume prob = nets::forward_volume(net, c.inputs.dce, 4, o.jobs);
  const LargestComponent liver = postprocess_liver(prob, o.threshold);
  write_mask(o.out, liver.mask);
  if (!o.prob_out.empty()) write_volume(o.prob_out, prob);
  out << "liver voxels " << liver.mask.count() << (liver.empty ? " (empty segmentation)" : "") << "\n";
  return kOk;
}

int cmd_detect(const Options& o, std::ostream& out) {
  const nets::DetectVariant v = parse_variant(o.variant);
  const nets::Network liver_net = load_net(o.liver_net, nets::build_liver_net());
  const nets::Network det_net = load_net(o.detect_net, nets::build_detect_net(v));
  const auto c = pipeline::load_case(o.case_dir, false);
  const auto seg = pipeline::segment_liver(liver_net, c.inputs, o.jobs);
  const Volume prob = pipeline::detect_probability(det_net, c.inputs, v, o.jobs);
  DetectPostConfig pc;
  pc.threshold = o.threshold;
  const DetectResult det = postprocess_detect(prob, seg.liver.mask, pc);
  const fs::path dir = o.out_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  write_mask(dir / "liver.hvol", seg.liver.mask);
  write_volume(dir / "lesion_prob.hvol", prob);
  write_mask(dir / "detections.hvol", det.mask);
  write_text_atomic(dir / "objects.csv", format_objects_csv(det.objects));
  out << det.objects.size() << " objects; wrote " << dir.string() << "\n";
  return kOk;
}

std::string seg_row(const std::string& id, const SegMetricReport& r) {
  return id + "," + fmt("%.6f", r.dsc) + "," + fmt("%.6f", r.rvd) + "," +
         (std::isinf(r.hd95) ? std::string("inf") : fmt("%.6f", r.hd95)) + "\n";
}

int cmd_eval_seg(const Options& o, std::ostream& out) {
  std::string csv = "case,dsc,rvd,hd95\n";
  if (!o.pred.empty()) {
    const BinaryMask pred = read_mask(o.pred), ref = read_mask(o.ref);
    if (!pred.same_geometry(ref)) throw DataError("prediction and reference differ in geometry");
    csv += seg_row(fs::path(o.pred).stem().string(), pipeline::evaluate_liver(pred, ref));
  } else {
    const nets::Network net = load_net(o.liver_net, nets::build_liver_net());
    std::vector<double> d, r, h;
    for (const auto& c : pipeline::load_split(o.corpus, o.split_name)) {
      const Volume prob = nets::forward_volume(net, c.inputs.dce, 4, o.jobs);
      const SegMetricReport m = pipeline::evaluate_liver(postprocess_liver(prob, o.threshold).mask, c.liver);
      csv += seg_row(c.id, m);
      d.push_back(m.dsc);
      r.push_back(m.rvd);
      h.push_back(m.hd95);
    }
    if (d.empty()) throw DataError("split '" + o.split_name + "' has no cases");
    csv += seg_row("median", {median(d), median(r), median(h)});
  }
  write_or_print(o.out, csv, out);
  return kOk;
}

std::vector<pipeline::InferredCase> infer_split(const Options& o, nets::DetectVariant v) {
  const nets::Network liver_net = load_net(o.liver_net, nets::build_liver_net());
  const nets::Network det_net = load_net(o.detect_net, nets::build_detect_net(v));
  std::vector<pipeline::InferredCase> out;
  for (const auto& c : pipeline::load_split(o.corpus, o.split_name))
    out.push_back(pipeline::infer_case(liver_net, det_net, c, v, o.jobs));
  if (out.empty()) throw DataError("split '" + o.split_name + "' has no cases");
  return out;
}

int cmd_eval_detect(const Options& o, std::ostream& out) {
  const nets::DetectVariant v = parse_variant(o.variant);
  DetectPostConfig pc;
  pc.threshold = o.threshold;
  const auto s = pipeline::evaluate_detection(infer_split(o, v), pc);
  std::string csv = "case,lesions,detected,tpr,false_positives\n";
  for (const auto& c : s.cases) {
    csv += c.id + "," + std::to_string(c.lesions) + "," + std::to_string(c.match.detected) + "," +
           (c.match.tpr ? fmt("%.6f", *c.match.tpr) : std::string("")) + "," +
           std::to_string(c.match.false_positives) + "\n";
  }
  csv += "summary," + std::to_string(s.lesions) + "," + std::to_string(s.detected) + "," + fmt("%.6f", s.mean_tpr) +
         "," + fmt("%g", s.median_fpc) + "\n";
  write_or_print(o.out, csv, out);
  if (!o.sizes_csv.empty()) write_text_atomic(o.sizes_csv, format_size_histogram_csv(size_histogram(s.sizes)));
  return kOk;
}

int cmd_froc(const Options& o, std::ostream& out) {
  const nets::DetectVariant v = parse_variant(o.variant);
  const FrocCurve curve = pipeline::froc_curve(infer_split(o, v), o.jobs);
  write_or_print(o.out, format_froc_csv(curve), out);
  if (!o.svg.empty()) write_text_atomic(o.svg, format_froc_svg(curve, std::string("FROC (") + nets::to_string(v) + ")"));
  return kOk;
}

void add_detect_model_flags(CLI::App* c, Options& o) {
  c->add_option("--liver-net", o.liver_net, "Liver network checkpoint")->required()->check(CLI::ExistingFile);
  c->add_option("--detect-net", o.detect_net, "Detection network checkpoint")->required()->check(CLI::ExistingFile);
  c->add_option("--variant", o.variant, "dual | single-dce | single-concat");
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Liver segmentation and liver metastasis detection with dilated FCNs", "hseg"};
  app.require_subcommand(1);
  Options o;

  auto* ph = app.add_subcommand("phantom", "Generate a synthetic phantom corpus");
  ph->add_option("--out", o.corpus_out, "Corpus directory")->required();
  ph->add_option("--cases", o.cases, "Number of cases")->required()->check(CLI::PositiveNumber);
  ph->add_option("--seed", o.seed, "Corpus seed");
  ph->add_option("--split", o.split, "Train, val and test counts (default 70/10/20 percent)")->expected(3);
  ph->add_option("--dims", o.dims, "Grid size x y z")->expected(3);
  ph->add_option("--lesions", o.lesion_range, "Lesion count range min max")->expected(2);
  ph->add_option("--noise", o.noise, "Noise standard deviation");
  ph->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* tl = app.add_subcommand("train-liver", "Train the liver segmentation network");
  add_train_flags(tl, o.tl, false);
  auto* td = app.add_subcommand("train-detect", "Train a lesion detection network");
  add_train_flags(td, o.td, true);

  auto* sg = app.add_subcommand("segment", "Segment the liver of one case");
  sg->add_option("--case", o.case_dir, "Case directory (dce.hvol, dw.hvol, grouping.txt)")->required()->check(CLI::ExistingDirectory);
  sg->add_option("--liver-net", o.liver_net, "Liver network checkpoint")->required()->check(CLI::ExistingFile);
  sg->add_option("--out", o.out, "Output liver mask")->required();
  sg->add_option("--prob", o.prob_out, "Optional probability volume output");
  sg->add_option("--threshold", o.threshold, "Probability threshold")->check(CLI::Range(0.0, 1.0));
  sg->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* dt = app.add_subcommand("detect", "Segment the liver and detect lesions in one case");
  dt->add_option("--case", o.case_dir, "Case directory")->required()->check(CLI::ExistingDirectory);
  add_detect_model_flags(dt, o);
  dt->add_option("--out-dir", o.out_dir, "Output directory")->required();
  dt->add_option("--threshold", o.threshold, "Detection probability threshold")->check(CLI::Range(0.0, 1.0));
  dt->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* es = app.add_subcommand("eval-seg", "DSC, RVD and HD95 of liver segmentations");
  auto* pred = es->add_option("--pred", o.pred, "Predicted mask")->check(CLI::ExistingFile);
  auto* ref = es->add_option("--ref", o.ref, "Reference mask")->check(CLI::ExistingFile);
  auto* corpus = es->add_option("--corpus", o.corpus, "Corpus directory")->check(CLI::ExistingDirectory);
  auto* lnet = es->add_option("--liver-net", o.liver_net, "Liver network checkpoint")->check(CLI::ExistingFile);
  es->add_option("--split", o.split_name, "Split to evaluate (default test)");
  es->add_option("--threshold", o.threshold, "Probability threshold")->check(CLI::Range(0.0, 1.0));
  es->add_option("--out", o.out, "Output CSV (default stdout)");
  es->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
  pred->needs(ref);
  ref->needs(pred);
  corpus->needs(lnet);
  lnet->needs(corpus);
  pred->excludes(corpus);

  auto* ed = app.add_subcommand("eval-detect", "TPR and false positives per case at one threshold");
  ed->add_option("--corpus", o.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  add_detect_model_flags(ed, o);
  ed->add_option("--split", o.split_name, "Split to evaluate (default test)");
  ed->add_option("--threshold", o.threshold, "Detection probability threshold")->check(CLI::Range(0.0, 1.0));
  ed->add_option("--out", o.out, "Output CSV (default stdout)");
  ed->add_option("--sizes-csv", o.sizes_csv, "Lesion size histogram CSV");
  ed->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* fr = app.add_subcommand("froc", "FROC curve over thresholds 0.90 to 0.00");
  fr->add_option("--corpus", o.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  add_detect_model_flags(fr, o);
  fr->add_option("--split", o.split_name, "Split to evaluate (default test)");
  fr->add_option("--out", o.out, "Output CSV (default stdout)");
  fr->add_option("--svg", o.svg, "Optional SVG plot");
  fr->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
    if (es->parsed() && o.pred.empty() && o.corpus.empty()) {
      throw UsageError("eval-seg needs either --pred/--ref or --corpus/--liver-net");
    }
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (ph->parsed()) return cmd_phantom(o, out);
    if (tl->parsed()) return cmd_train(tl, o.tl, false, out, err);
    if (td->parsed()) return cmd_train(td, o.td, true, out, err);
    if (sg->parsed()) return cmd_segment(o, out);
    if (dt->parsed()) return cmd_detect(o, out);
    if (es->parsed()) return cmd_eval_seg(o, out);
    if (ed->parsed()) return cmd_eval_detect(o, out);
    if (fr->parsed()) return cmd_froc(o, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace hseg::cli
