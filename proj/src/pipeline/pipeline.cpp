#include "hseg/pipeline.hpp"

#include <limits>

#include "hseg/error.hpp"

namespace hseg::pipeline {

CaseInputs prepare_inputs(const Volume& dce, const PhaseGrouping& grouping, const Volume& dw) {
  if (!dce.same_geometry(dw)) throw DataError("DCE and DW volumes differ in geometry");
  const Volume phases = dce.channels() == int(grouping.phase_count()) ? dce : average_phases(dce, grouping);
  return {normalize_zmuv(phases), normalize_zmuv(dw)};
}

LoadedCase load_case(const std::filesystem::path& dir, bool require_masks) {
  LoadedCase c;
  c.id = dir.filename().string();
  const Volume dce = read_volume(dir / "dce.hvol");
  const Volume dw = read_volume(dir / "dw.hvol");
  const PhaseGrouping g =
      std::filesystem::exists(dir / "grouping.txt") ? read_phase_grouping(dir / "grouping.txt") : default_phase_grouping();
  if (dce.channels() != int(g.phase_count())) {
    try {
      g.validate(dce.channels());
    } catch (const std::invalid_argument& e) {
      throw DataError(c.id + ": grouping does not fit dce.hvol: " + e.what());
    }
  }
  if (dw.channels() != 3) throw DataError(c.id + ": dw.hvol must have 3 channels, found " + std::to_string(dw.channels()));
  c.inputs = prepare_inputs(dce, g, dw);
  const bool have_masks = std::filesystem::exists(dir / "liver.hvol") && std::filesystem::exists(dir / "lesions.hvol");
  if (require_masks && !have_masks) throw DataError(c.id + ": missing liver.hvol or lesions.hvol");
  if (have_masks) {
    c.liver = read_mask(dir / "liver.hvol");
    c.lesions = read_mask(dir / "lesions.hvol");
    if (!c.liver.same_geometry(dce) || !c.lesions.same_geometry(dce)) throw DataError(c.id + ": mask geometry differs from dce.hvol");
  }
  return c;
}

LoadedCase case_from_phantom(std::string id, const phantom::Phantom& ph) {
  return {std::move(id), prepare_inputs(ph.dce, ph.grouping, ph.dw), ph.liver, ph.lesions};
}

std::vector<LoadedCase> load_split(const std::filesystem::path& corpus_dir, const std::string& split) {
  std::vector<LoadedCase> out;
  for (const auto& e : phantom::read_manifest(corpus_dir / "manifest.tsv"))
    if (e.split == split) out.push_back(load_case(corpus_dir / e.case_id));
  return out;
}

Volume detect_input(const CaseInputs& in, nets::DetectVariant v) {
  if (v == nets::DetectVariant::kSingleDce) return in.dce;
  return concat_channels(in.dce, in.dw);
}

std::vector<train::TrainCase> liver_training_cases(std::span<const LoadedCase> cases) {
  std::vector<train::TrainCase> out;
  for (const auto& c : cases) out.push_back({c.inputs.dce, c.liver, c.liver});
  return out;
}

std::vector<train::TrainCase> detect_training_cases(std::span<const LoadedCase> cases, nets::DetectVariant v) {
  std::vector<train::TrainCase> out;
  for (const auto& c : cases) out.push_back({detect_input(c.inputs, v), c.lesions, c.liver});
  return out;
}

Segmentation segment_liver(const nets::Network& liver_net, const CaseInputs& in, int jobs) {
  Segmentation s;
  s.probability = nets::forward_volume(liver_net, in.dce, 4, jobs);
  s.liver = postprocess_liver(s.probability);
  return s;
}

Volume detect_probability(const nets::Network& detect_net, const CaseInputs& in, nets::DetectVariant v, int jobs) {
  return nets::forward_volume(detect_net, detect_input(in, v), 4, jobs);
}

SegMetricReport evaluate_liver(const BinaryMask& pred, const BinaryMask& ref) {
  if (pred.empty() && !ref.empty()) return {0.0, -100.0, std::numeric_limits<double>::infinity()};
  return evaluate_segmentation(pred, ref);
}

InferredCase infer_case(const nets::Network& liver_net, const nets::Network& detect_net, const LoadedCase& c,
                        nets::DetectVariant v, int jobs) {
  return {c.id, detect_probability(detect_net, c.inputs, v, jobs), segment_liver(liver_net, c.inputs, jobs).liver.mask,
          c.lesions};
}

DetectionSummary evaluate_detection(std::span<const InferredCase> cases, const DetectPostConfig& cfg) {
  if (cases.empty()) throw DataError("evaluate_detection: no cases");
  DetectionSummary s;
  std::vector<double> tprs, fpcs;
  for (const auto& c : cases) {
    const auto truth = label_objects_26(c.lesions);
    DetectionMatch m = detection_match(postprocess_detect(c.prob, c.liver, cfg).objects, truth);
    for (std::size_t i = 0; i < truth.size(); ++i) s.sizes.push_back({truth[i].volume_ml, bool(m.truth_detected[i])});
    if (m.tpr) tprs.push_back(*m.tpr);
    fpcs.push_back(double(m.false_positives));
    s.lesions += truth.size();
    s.detected += m.detected;
    s.cases.push_back({c.id, truth.size(), std::move(m)});
  }
  for (double t : tprs) s.mean_tpr += t;
  if (!tprs.empty()) s.mean_tpr /= double(tprs.size());
  s.median_fpc = median(fpcs);
  return s;
}

FrocCurve froc_curve(std::span<const InferredCase> cases, int jobs) {
  std::vector<FrocCase> fc;
  for (const auto& c : cases) fc.push_back({&c.prob, &c.lesions, &c.liver});
  return froc(fc, {}, jobs);
}

}  // namespace hseg::pipeline
