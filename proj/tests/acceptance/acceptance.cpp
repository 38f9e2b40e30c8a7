// Acceptance runner: one PASS/FAIL line per criterion.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gradcheck.hpp"
#include "hseg/error.hpp"
#include "hseg/fileio.hpp"
#include "hseg/metrics.hpp"
#include "hseg/nets.hpp"
#include "hseg/parallel.hpp"
#include "hseg/phantom.hpp"
#include "hseg/pipeline.hpp"
#include "hseg/postprocess.hpp"
#include "hseg/train.hpp"
#include "oracles.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

using namespace hseg;
using namespace hseg::testing;
namespace fs = std::filesystem;

namespace {

struct Options {
  int jobs = 1;
  std::uint64_t seed = 1;
  std::string report_dir;
};

/// Collects sub-check failures for one criterion.
class Verdict {
 public:
  void check(bool ok, const std::string& what) {
    ++checks_;
    if (!ok && failures_.size() < 8) failures_.push_back(what);
    failed_ += !ok;
  }
  void note(const std::string& s) { notes_ += (notes_.empty() ? "" : "; ") + s; }
  bool pass() const { return failed_ == 0 && checks_ > 0; }
  std::string summary() const {
    std::string s = notes_;
    if (failed_) {
      s += (s.empty() ? "" : "; ") + std::to_string(failed_) + "/" + std::to_string(checks_) + " checks failed:";
      for (const auto& f : failures_) s += " [" + f + "]";
    } else {
      s += (s.empty() ? "" : "; ") + std::to_string(checks_) + " checks";
    }
    return s;
  }

 private:
  std::size_t checks_ = 0, failed_ = 0;
  std::vector<std::string> failures_;
  std::string notes_;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int rand_in(Rng& rng, int lo, int hi) { return lo + int(rng.uniform_int(std::uint64_t(hi - lo + 1))); }

// ---- gradient master test ------------------------------------------------------

void gradient(const Options&, Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr int kShapes = 20;
  constexpr double kTol = 1e-3;
  Rng rng(2024);
  std::vector<std::pair<std::string, double>> worst;
  auto record = [&](const std::string& kind, double err) {
    auto it = std::find_if(worst.begin(), worst.end(), [&](const auto& p) { return p.first == kind; });
    if (it == worst.end()) worst.push_back({kind, err});
    else it->second = std::max(it->second, err);
    v.check(err < kTol, kind + " rel err " + fmt("%.2e", err));
  };

  for (int t = 0; t < kShapes; ++t) {
    const nn::Shape4 s{rand_in(rng, 1, 2), rand_in(rng, 3, 7), rand_in(rng, 3, 7), rand_in(rng, 1, 3)};
    const int k = t % 4 == 3 ? 1 : 3;
    auto p = nn::ConvParams<double>::zeros(k, k, s.c, rand_in(rng, 1, 3), rand_in(rng, 1, 3));
    for (auto& w : p.weights) w = rng.uniform(-1, 1);
    for (auto& b : p.bias) b = rng.uniform(-1, 1);
    DTensor in = random_tensor(s, rng);
    const DTensor r = random_tensor({s.n, s.h, s.w, p.out_channels}, rng);
    const auto g = nn::conv2d_backward(in, p, r);
    auto f = [&] { return project(nn::conv2d(in, p), r); };
    record("conv", relative_error(g.input.vec(), numeric_gradient(in.vec(), f)));
    record("conv", relative_error(g.weights, numeric_gradient(p.weights, f)));
    record("conv", relative_error(g.bias, numeric_gradient(p.bias, f)));
  }

  for (int t = 0; t < kShapes; ++t) {
    const nn::Shape4 s{rand_in(rng, 1, 3), rand_in(rng, 2, 4), rand_in(rng, 2, 4), rand_in(rng, 1, 3)};
    DTensor in = random_tensor(s, rng, -2, 2);
    auto p = nn::BatchNormParams<double>::identity(s.c);
    for (auto& g : p.gamma) g = rng.uniform(0.5, 2.0);
    for (auto& b : p.beta) b = rng.uniform(-1, 1);
    const DTensor r = random_tensor(s, rng);
    nn::BatchNormCache cache;
    auto scratch = p;
    nn::batchnorm_forward(in, scratch, nn::Mode::kTrain, &cache);
    const auto g = nn::batchnorm_backward(in, p, cache, r);
    auto f = [&] {
      auto q = p;
      return project(nn::batchnorm_forward(in, q, nn::Mode::kTrain), r);
    };
    record("batchnorm", relative_error(g.input.vec(), numeric_gradient(in.vec(), f)));
    record("batchnorm", relative_error(g.gamma, numeric_gradient(p.gamma, f)));
    record("batchnorm", relative_error(g.beta, numeric_gradient(p.beta, f)));
  }

  for (int t = 0; t < kShapes; ++t) {
    const nn::Shape4 s{rand_in(rng, 1, 2), rand_in(rng, 1, 5), rand_in(rng, 1, 5), rand_in(rng, 1, 4)};
    DTensor x = random_tensor(s, rng);
    for (auto& e : x.vec()) e += e < 0 ? -0.05 : 0.05;  // keep clear of the kink
    const DTensor r = random_tensor(s, rng);
    auto f = [&] { return project(nn::relu(x), r); };
    record("relu", relative_error(nn::relu_backward(nn::relu(x), r).vec(), numeric_gradient(x.vec(), f)));
  }

  for (int t = 0; t < kShapes; ++t) {
    const nn::Shape4 s{rand_in(rng, 1, 2), rand_in(rng, 1, 4), rand_in(rng, 1, 4), rand_in(rng, 2, 5)};
    DTensor z = random_tensor(s, rng, -3, 3);
    const DTensor r = random_tensor(s, rng);
    auto f = [&] { return project(nn::softmax(z), r); };
    record("softmax", relative_error(nn::softmax_backward(nn::softmax(z), r).vec(), numeric_gradient(z.vec(), f)));
  }

  for (int t = 0; t < kShapes; ++t) {
    const nn::Shape4 s{rand_in(rng, 1, 2), rand_in(rng, 2, 5), rand_in(rng, 2, 5), rand_in(rng, 1, 4)};
    const double rate = rng.uniform(0.1, 0.7);
    const std::uint64_t seed = rng.next();
    DTensor x = random_tensor(s, rng);
    const DTensor r = random_tensor(s, rng);
    std::vector<std::uint8_t> mask;
    Rng r0(seed);
    nn::dropout(x, rate, r0, nn::Mode::kTrain, &mask);
    auto f = [&] {
      Rng same(seed);
      return project(nn::dropout(x, rate, same, nn::Mode::kTrain), r);
    };
    record("dropout", relative_error(nn::dropout_backward(r, rate, mask).vec(), numeric_gradient(x.vec(), f)));
  }

  for (int t = 0; t < kShapes; ++t) {
    const std::size_t n = std::size_t(rand_in(rng, 4, 300));
    std::vector<double> pred(n), target(n);
    for (auto& p : pred) p = rng.uniform(0.01, 0.99);
    for (auto& y : target) y = rng.uniform() < 0.3 ? 1.0 : 0.0;
    const auto res = nn::dice_loss<double>(pred, target);
    auto f = [&] { return nn::dice_loss<double>(pred, target).loss; };
    record("dice loss", relative_error(res.grad, numeric_gradient(pred, f)));
  }

  for (int t = 0; t < kShapes; ++t) {
    const nn::Shape4 s{rand_in(rng, 1, 3), rand_in(rng, 1, 6), rand_in(rng, 1, 6), 2};
    DTensor probs = nn::softmax(random_tensor(s, rng, -2, 2));
    DTensor target(s);
    for (std::size_t px = 0; px < s.pixels(); ++px) target.vec()[px * 2 + (rng.uniform() < 0.2 ? 1 : 0)] = 1.0;
    const std::vector<double> w = {rng.uniform(0.3, 1.0), rng.uniform(1.0, 15.0)};
    const auto res = nn::weighted_cross_entropy(probs, target, std::span<const double>(w));
    auto f = [&] { return nn::weighted_cross_entropy(probs, target, std::span<const double>(w)).loss; };
    record("weighted CE", relative_error(res.grad, numeric_gradient(probs.vec(), f, 1e-5)));
  }

  const double secs = seconds_since(t0);
  v.check(secs < 120.0, "runtime " + fmt("%.1f s", secs));
  std::string s = std::to_string(kShapes) + " shapes per kind, max rel err";
  for (const auto& [k, e] : worst) s += " " + k + " " + fmt("%.1e", e);
  v.note(s);
}

// ---- architecture conformance ----------------------------------------------------

struct Box {
  int y0 = 1 << 30, y1 = -1, x0 = 1 << 30, x1 = -1;
  int height() const { return y1 - y0 + 1; }
  int width() const { return x1 - x0 + 1; }
};

// Output pixels that change when one centre input pixel is perturbed.
Box impulse_box(const nets::Network& net, nn::Shape4 s, int channel, Rng& rng) {
  nn::Tensor base(s);
  for (auto& e : base.vec()) e = float(rng.uniform(-1, 1));
  nn::Tensor poked = base;
  poked.at(0, s.h / 2, s.w / 2, channel) += 5.0f;
  const nn::Tensor a = net.infer(base), b = net.infer(poked);
  Box box;
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      if (a.at(0, y, x, 1) != b.at(0, y, x, 1)) {
        box.y0 = std::min(box.y0, y);
        box.y1 = std::max(box.y1, y);
        box.x0 = std::min(box.x0, x);
        box.x1 = std::max(box.x1, x);
      }
  return box;
}

void check_box(Verdict& v, const std::string& what, const Box& b, int centre, int rf) {
  const int half = rf / 2;
  v.check(b.height() == rf && b.width() == rf, what + " impulse box " + std::to_string(b.height()) + "x" +
                                                   std::to_string(b.width()));
  v.check(b.y0 >= centre - half && b.y1 <= centre + half && b.x0 >= centre - half && b.x1 <= centre + half,
          what + " impulse box off centre");
}

void architecture(const Options&, Verdict& v) {
  Rng rng(5);
  const auto liver = nets::build_liver_net();
  const auto rf = nets::receptive_field(liver);
  v.check(rf == nets::ReceptiveField{67, 67}, "liver RF " + std::to_string(rf.h) + "x" + std::to_string(rf.w));
  v.check(liver.conv_layer_count() == 9, "liver conv layers " + std::to_string(liver.conv_layer_count()));
  const auto dual = nets::build_dual_pathway_net();
  v.check(dual.concat_channels() == 640, "dual concat " + std::to_string(dual.concat_channels()));
  for (int c : {6, 9}) {
    const auto single = nets::build_single_pathway_net(c);
    v.check(single.concat_channels() == 320, "single concat " + std::to_string(single.concat_channels()));
  }

  const nets::Network lnet(liver, nets::init_params(liver, nets::Initializer::kGlorotUniform, rng));
  check_box(v, "liver", impulse_box(lnet, {1, 81, 81, 6}, 2, rng), 40, 67);
  const nets::Network dnet(dual, nets::init_params(dual, nets::Initializer::kHeUniform, rng));
  check_box(v, "DCE pathway", impulse_box(dnet, {1, 141, 141, 9}, 1, rng), 70, 133);
  check_box(v, "DW pathway", impulse_box(dnet, {1, 141, 141, 9}, 7, rng), 70, 133);
  v.note("liver RF 67x67, 9 conv layers; concat 640 / 320; pathway RF 133");
}

// ---- oracle equivalence ------------------------------------------------------------

template <typename F>
bool same_throw(F&& f) {
  try {
    f();
  } catch (const DataError&) {
    return true;
  }
  return false;
}

void oracles(const Options&, Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(77);
  const std::vector<StructuringElement> elems = {StructuringElement::plus2d(), StructuringElement::box2d(5),
                                                 StructuringElement::box3d(3)};
  for (int t = 0; t < 100; ++t) {
    const std::string id = "mask " + std::to_string(t);
    const BinaryMask m = t % 2 ? random_mask(rng) : random_blob_mask(rng);
    BinaryMask y = m;
    for (auto& e : y.data())
      if (rng.uniform() < 0.1) e = 1 - e;

    if (!m.empty() || !y.empty()) v.check(dsc(m, y) == oracle_dsc(m, y), id + " dsc");
    else v.check(same_throw([&] { dsc(m, y); }), id + " dsc empty");
    if (!y.empty()) v.check(rvd(m, y) == oracle_rvd(m, y), id + " rvd");
    else v.check(same_throw([&] { rvd(m, y); }), id + " rvd empty");
    if (!m.empty() && !y.empty()) v.check(hd95(m, y) == oracle_hd95(m, y), id + " hd95");
    else v.check(same_throw([&] { hd95(m, y); }), id + " hd95 empty");

    v.check(fill_holes_3d(m) == oracle_fill_holes(m), id + " fill holes");
    v.check(largest_cc(m).mask == oracle_largest_cc(m), id + " largest cc");
    for (const auto& se : elems) {
      const BinaryMask di = oracle_dilate(m, se), er = oracle_erode(m, se);
      v.check(dilate(m, se) == di, id + " dilate");
      v.check(erode(m, se) == er, id + " erode");
      v.check(close(m, se) == oracle_erode(di, se), id + " close");
      v.check(open(m, se) == oracle_dilate(er, se), id + " open");
    }
    const auto objects = label_objects_26(m);
    auto comps = uf_components(m, Connectivity::k26);
    std::vector<std::vector<std::size_t>> got;
    for (const auto& o : objects) got.push_back(o.voxels);
    std::sort(got.begin(), got.end());
    std::sort(comps.begin(), comps.end());
    v.check(got == comps, id + " 26-labeling");
  }
  const double secs = seconds_since(t0);
  v.check(secs < 300.0, "runtime " + fmt("%.1f s", secs));
  v.note("100 random masks up to 16^3, " + fmt("%.1f s", secs));
}

// ---- pipeline conformance ------------------------------------------------------------

Volume prob_of(const Dims3& d, const Spacing3& s, float fill = 0.0f) {
  Volume p(d, 1, s);
  std::fill(p.data().begin(), p.data().end(), fill);
  return p;
}

void pipeline_conformance(const Options&, Verdict& v) {
  const Dims3 d{20, 20, 8};
  const Spacing3 s{1, 1, 2};

  // Tie rule: p == T stays background.
  Volume tie = prob_of(d, s, 0.5f);
  tie.data()[5] = 0.5000001f;
  const BinaryMask th = threshold_prob(tie, 0.5);
  v.check(th.count() == 1 && th.data()[5] == 1, "threshold tie");
  v.check(threshold_prob(prob_of(d, s, 0.0f), 0.0).count() == 0, "T=0 keeps only p>0");

  // Liver chain: threshold, fill holes, largest component, in that order.
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    Volume p = prob_of(d, s);
    for (auto& e : p.data()) e = float(rng.uniform());
    const BinaryMask want = oracle_largest_cc(oracle_fill_holes(threshold_prob(p, 0.5)));
    v.check(postprocess_liver(p).mask == want, "liver chain on random map " + std::to_string(t));
  }
  // A hollow big blob plus a small blob: filled big blob survives.
  Volume hollow = prob_of(d, s);
  for (int z = 1; z < 7; ++z)
    for (int y = 2; y < 12; ++y)
      for (int x = 2; x < 12; ++x) {
        const bool shell = z == 1 || z == 6 || y == 2 || y == 11 || x == 2 || x == 11;
        hollow.at(x, y, z, 0) = shell ? 0.9f : 0.1f;
      }
  for (int y = 15; y < 18; ++y)
    for (int x = 15; x < 18; ++x) hollow.at(x, y, 3, 0) = 0.9f;
  const BinaryMask filled = postprocess_liver(hollow).mask;
  v.check(filled.count() == 6 * 10 * 10, "hollow blob filled and small blob dropped");

  // Detection: masking with the 5x5-dilated liver, closing, plus-opening.
  BinaryMask liver(d, s);
  for (int z = 0; z < 8; ++z)
    for (int y = 4; y < 12; ++y)
      for (int x = 4; x < 12; ++x) liver.set(x, y, z, true);
  Volume iso = prob_of(d, s);
  iso.at(8, 8, 4, 0) = 0.9f;
  v.check(postprocess_detect(iso, liver).objects.empty(), "isolated voxel removed by plus opening");
  Volume outside = prob_of(d, s);
  for (int z = 2; z < 5; ++z)
    for (int y = 15; y < 19; ++y)
      for (int x = 15; x < 19; ++x) outside.at(x, y, z, 0) = 0.95f;
  v.check(postprocess_detect(outside, liver).objects.empty(), "blob outside dilated liver");
  Volume inside = prob_of(d, s);
  for (int z = 3; z < 6; ++z)
    for (int y = 7; y < 10; ++y)
      for (int x = 7; x < 10; ++x) inside.at(x, y, z, 0) = 0.9f;
  const auto ires = postprocess_detect(inside, liver);
  v.check(ires.objects.size() == 1 && ires.objects[0].voxel_count == 15, "3x3x3 blob inside liver kept as plus stack");
  Volume small = prob_of(d, s);
  for (int z = 3; z < 5; ++z)
    for (int y = 7; y < 9; ++y)
      for (int x = 7; x < 9; ++x) small.at(x, y, z, 0) = 0.9f;
  v.check(postprocess_detect(small, liver).objects.empty(), "2x2x2 blob holds no plus and is removed");
  // The dilated liver reaches exactly two voxels past the liver edge (x = 11).
  Volume wide = prob_of(d, s);
  for (int z = 3; z < 6; ++z)
    for (int y = 5; y < 12; ++y)
      for (int x = 10; x < 18; ++x) wide.at(x, y, z, 0) = 0.9f;
  const auto wres = postprocess_detect(wide, liver);
  int max_x = -1;
  for (const auto& ob : wres.objects)
    for (std::size_t i : ob.voxels) max_x = std::max(max_x, int(i % std::size_t(d.x)));
  v.check(wres.objects.size() == 1 && max_x == 13, "detection mask reaches x " + std::to_string(max_x));

  // Full detection chain against composed oracles.
  for (int t = 0; t < 20; ++t) {
    Volume p = prob_of(d, s);
    for (auto& e : p.data()) e = float(rng.uniform() * rng.uniform());
    BinaryMask m = threshold_prob(p, 0.5);
    const BinaryMask region = oracle_dilate(liver, StructuringElement::box2d(5));
    for (std::size_t i = 0; i < m.voxels(); ++i) m.data()[i] &= region.data()[i];
    const auto box = StructuringElement::box3d(3), plus = StructuringElement::plus2d();
    const BinaryMask want = oracle_dilate(oracle_erode(oracle_erode(oracle_dilate(m, box), box), plus), plus);
    v.check(postprocess_detect(p, liver).mask == want, "detection chain on random map " + std::to_string(t));
  }
  v.note("tie rule, liver and detection chains, masking");
}

// ---- FROC protocol ------------------------------------------------------------------------

void froc_protocol(const Options&, Verdict& v) {
  const auto ts = froc_thresholds();
  v.check(ts.size() == 10, "threshold count " + std::to_string(ts.size()));
  for (std::size_t i = 0; i < ts.size(); ++i)
    v.check(std::abs(ts[i] - (0.9 - 0.1 * double(i))) < 1e-12, "threshold " + std::to_string(i));

  Rng rng(6);
  for (int t = 0; t < 30; ++t) {
    const Dims3 d{16, 16, 6};
    const Spacing3 s{1, 1, 2};
    BinaryMask liver(d, s);
    std::fill(liver.data().begin(), liver.data().end(), 1);
    BinaryMask lesions(d, s);
    for (int k = 0; k < 4; ++k)
      lesions.set(int(rng.uniform_int(16)), int(rng.uniform_int(16)), int(rng.uniform_int(6)), true);
    Volume prob(d, 1, s);
    for (auto& e : prob.data()) e = float(rng.uniform() * rng.uniform());
    const std::vector<FrocCase> cases{{&prob, &lesions, &liver}};
    DetectPostConfig raw;
    raw.morphology = false;
    const auto curve = froc(cases, raw);
    v.check(curve.points.size() == 10, "curve size");
    for (std::size_t i = 1; i < curve.points.size(); ++i)
      v.check(curve.points[i - 1].mean_tpr <= curve.points[i].mean_tpr, "TPR increases with T on map " + std::to_string(t));
  }
  v.note("10 thresholds 0.90..0.00; TPR monotone on 30 random maps");
}

// ---- end-to-end phantom benchmark ----------------------------------------------------------

struct Benchmark {
  std::vector<pipeline::LoadedCase> train, test;
};

Benchmark make_benchmark(std::uint64_t seed, int jobs) {
  const phantom::CorpusSplit split{20, 0, 4};
  std::vector<pipeline::LoadedCase> cases(std::size_t(split.total()));
  parallel_for(cases.size(), jobs, [&](std::size_t k) {
    phantom::PhantomConfig cfg;
    cfg.seed = phantom::case_seed(seed, int(k));
    char id[16];
    std::snprintf(id, sizeof id, "case_%03zu", k);
    cases[k] = pipeline::case_from_phantom(id, phantom::generate_phantom(cfg));
  });
  Benchmark b;
  b.train.assign(std::make_move_iterator(cases.begin()), std::make_move_iterator(cases.begin() + split.train));
  b.test.assign(std::make_move_iterator(cases.begin() + split.train), std::make_move_iterator(cases.end()));
  return b;
}

void report(const Options& o, const std::string& name, const std::string& text) {
  if (o.report_dir.empty()) return;
  fs::create_directories(o.report_dir);
  write_text_atomic(fs::path(o.report_dir) / name, text);
}

std::string detection_csv(const pipeline::DetectionSummary& s) {
  std::string csv = "case,lesions,detected,tpr,false_positives\n";
  for (const auto& c : s.cases)
    csv += c.id + "," + std::to_string(c.lesions) + "," + std::to_string(c.match.detected) + "," +
           (c.match.tpr ? fmt("%.6f", *c.match.tpr) : "") + "," + std::to_string(c.match.false_positives) + "\n";
  return csv;
}

void benchmark(const Options& o, Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  const Benchmark b = make_benchmark(o.seed, o.jobs);
  std::vector<std::string> times;
  auto lap = [&, last = t0](const std::string& what) mutable {
    times.push_back(what + " " + fmt("%.0f s", seconds_since(last)));
    last = std::chrono::steady_clock::now();
  };
  lap("phantoms");

  train::TrainConfig lc = train::liver_defaults();
  lc.iterations = 2000;
  lc.batch_size = 6;
  lc.learning_rate = 1e-3;
  lc.loss = train::LossKind::kDice;
  lc.jobs = o.jobs;
  const auto lres = train::train_liver(pipeline::liver_training_cases(b.train), {}, lc);
  const nets::Network liver_net(nets::build_liver_net(), lres.params);
  lap("liver training");

  std::vector<double> dscs;
  std::string seg_csv = "case,dsc,rvd,hd95\n";
  for (const auto& c : b.test) {
    const auto m = pipeline::evaluate_liver(pipeline::segment_liver(liver_net, c.inputs, o.jobs).liver.mask, c.liver);
    dscs.push_back(m.dsc);
    seg_csv += c.id + "," + fmt("%.6f", m.dsc) + "," + fmt("%.6f", m.rvd) + "," + fmt("%.6f", m.hd95) + "\n";
  }
  report(o, "benchmark_seg.csv", seg_csv);
  const double med_dsc = median(dscs);
  v.check(med_dsc >= 0.90, "median liver DSC " + fmt("%.4f", med_dsc));

  train::TrainConfig dc = train::detect_defaults();
  dc.iterations = 2000;
  dc.batch_size = 4;
  dc.learning_rate = 1e-4;
  dc.loss = train::LossKind::kWeightedCe;
  dc.patch_size = 64;
  dc.jobs = o.jobs;
  double tpr[2] = {0, 0};
  const nets::DetectVariant variants[2] = {nets::DetectVariant::kDual, nets::DetectVariant::kSingleDce};
  for (int i = 0; i < 2; ++i) {
    const auto vr = variants[i];
    const std::string name = nets::to_string(vr);
    const auto dres = train::train_detect(pipeline::detect_training_cases(b.train, vr), {}, dc, vr);
    const nets::Network det_net(nets::build_detect_net(vr), dres.params);
    lap(name + " training");
    std::vector<pipeline::InferredCase> inferred;
    for (const auto& c : b.test) inferred.push_back(pipeline::infer_case(liver_net, det_net, c, vr, o.jobs));
    const auto s = pipeline::evaluate_detection(inferred);
    report(o, "benchmark_detect_" + name + ".csv", detection_csv(s));
    report(o, "benchmark_froc_" + name + ".csv", format_froc_csv(pipeline::froc_curve(inferred, o.jobs)));
    tpr[i] = s.mean_tpr;
    v.note(name + " TPR " + fmt("%.3f", s.mean_tpr) + " median FPC " + fmt("%g", s.median_fpc) + " (" +
           std::to_string(s.detected) + "/" + std::to_string(s.lesions) + " lesions)");
    if (vr == nets::DetectVariant::kDual) {
      v.check(s.mean_tpr >= 0.90, "dual TPR " + fmt("%.3f", s.mean_tpr));
      v.check(s.median_fpc <= 3.0, "dual median FPC " + fmt("%g", s.median_fpc));
    }
  }
  v.check(tpr[0] >= tpr[1], "dual TPR " + fmt("%.3f", tpr[0]) + " < single-dce TPR " + fmt("%.3f", tpr[1]));

  const double total = seconds_since(t0);
  v.note("median DSC " + fmt("%.4f", med_dsc));
  std::string t = "runtime " + fmt("%.1f min", total / 60.0) + " with " + std::to_string(o.jobs) + " jobs (";
  for (std::size_t i = 0; i < times.size(); ++i) t += (i ? ", " : "") + times[i];
  v.note(t + ")");
  v.check(total <= 45.0 * 60.0, "runtime " + fmt("%.1f min", total / 60.0) + " exceeds 45 min");
}

// ---- determinism ---------------------------------------------------------------------------------

std::vector<std::uint8_t> determinism_run(std::string& reports) {
  phantom::PhantomConfig pc;
  pc.dims = {48, 48, 8};
  pc.spacing = {6.0f, 6.0f, 6.0f};
  pc.radius_min_mm = 8.0;
  pc.lesions_max = 3;
  std::vector<pipeline::LoadedCase> cases;
  for (int k = 0; k < 3; ++k) {
    pc.seed = phantom::case_seed(11, k);
    cases.push_back(pipeline::case_from_phantom("case_" + std::to_string(k), phantom::generate_phantom(pc)));
  }
  const std::span<const pipeline::LoadedCase> tr(cases.data(), 2);

  train::TrainConfig lc = train::liver_defaults();
  lc.iterations = 15;
  lc.batch_size = 2;
  lc.validate_every = 5;
  const auto lres = train::train_liver(pipeline::liver_training_cases(tr),
                                       pipeline::liver_training_cases(std::span(cases).subspan(2)), lc);
  train::TrainConfig dc = train::detect_defaults();
  dc.iterations = 15;
  dc.batch_size = 2;
  dc.patch_size = 24;
  const auto v = nets::DetectVariant::kDual;
  const auto dres = train::train_detect(pipeline::detect_training_cases(tr, v), {}, dc, v);

  const nets::Network ln(nets::build_liver_net(), lres.params), dn(nets::build_detect_net(v), dres.params);
  std::vector<pipeline::InferredCase> inferred;
  for (const auto& c : cases) inferred.push_back(pipeline::infer_case(ln, dn, c, v, 1));
  reports = train::format_loss_csv(lres.history) + train::format_loss_csv(dres.history) +
            format_froc_csv(pipeline::froc_curve(inferred, 1)) + detection_csv(pipeline::evaluate_detection(inferred));
  for (const auto& c : inferred) {
    const auto m = pipeline::evaluate_liver(c.liver, cases[0].liver);
    reports += fmt("%.17g", m.dsc) + "," + fmt("%.17g", m.hd95) + "\n";
  }
  auto bytes = nets::encode_checkpoint(lres.params, &lres.optimizer);
  const auto more = nets::encode_checkpoint(dres.params, &dres.optimizer);
  bytes.insert(bytes.end(), more.begin(), more.end());
  return bytes;
}

void determinism(const Options&, Verdict& v) {
  std::string ra, rb;
  const auto a = determinism_run(ra);
  const auto b = determinism_run(rb);
  v.check(a == b, "checkpoints differ");
  v.check(ra == rb, "reports differ");
  v.note("two single-worker runs: " + std::to_string(a.size()) + " checkpoint bytes and " + std::to_string(ra.size()) +
         " report bytes identical");
}

struct Criterion {
  const char* name;
  std::function<void(const Options&, Verdict&)> run;
};

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Same allocator settings as the hseg tool: keep training buffers in the heap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  Options o;
  o.jobs = int(std::max(1u, std::thread::hardware_concurrency()));
  std::vector<std::string> only;
  CLI::App app{"Acceptance criteria runner"};
  app.add_option("--only", only, "Run only the named criteria");
  app.add_option("--jobs", o.jobs, "Worker threads for the benchmark")->check(CLI::PositiveNumber);
  app.add_option("--seed", o.seed, "Benchmark corpus seed");
  app.add_option("--report-dir", o.report_dir, "Write benchmark CSV reports here");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all = {
      {"gradient", gradient},           {"architecture", architecture}, {"oracles", oracles},
      {"pipeline", pipeline_conformance}, {"froc", froc_protocol},      {"benchmark", benchmark},
      {"determinism", determinism},
  };
  for (const auto& n : only)
    if (std::none_of(all.begin(), all.end(), [&](const Criterion& c) { return n == c.name; })) {
      std::cerr << "unknown criterion '" << n << "'\n";
      return 2;
    }

  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      c.run(o, v);
    } catch (const std::exception& e) {
      v.check(false, std::string("exception: ") + e.what());
    }
    failed += !v.pass();
    std::printf("%s %-12s %s (%.1f s)\n", v.pass() ? "PASS" : "FAIL", c.name, v.summary().c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
