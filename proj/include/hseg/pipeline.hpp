#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hseg/metrics.hpp"
#include "hseg/nets.hpp"
#include "hseg/phantom.hpp"
#include "hseg/postprocess.hpp"
#include "hseg/preprocess.hpp"
#include "hseg/train.hpp"
#include "hseg/volume.hpp"

namespace hseg::pipeline {

/// Normalized network inputs for one case.
struct CaseInputs {
  Volume dce;  // six phases
  Volume dw;   // three b-values
};

/// Phase-averages a time series (skipped when it already has one channel
/// per phase) and applies zero-mean-unit-variance normalization to each
/// modality over all its channels.
CaseInputs prepare_inputs(const Volume& dce, const PhaseGrouping& grouping, const Volume& dw);

struct LoadedCase {
  std::string id;
  CaseInputs inputs;
  BinaryMask liver;
  BinaryMask lesions;
};

/// Reads dce.hvol, dw.hvol, grouping.txt and, when present, the masks.
/// A missing grouping file means the default grouping.
LoadedCase load_case(const std::filesystem::path& case_dir, bool require_masks = true);

/// Case inputs and masks of an in-memory phantom; identical to writing it
/// with generate_corpus and reading it back with load_case.
LoadedCase case_from_phantom(std::string id, const phantom::Phantom& ph);

/// Cases of one split ("train", "val", "test") listed in manifest.tsv.
std::vector<LoadedCase> load_split(const std::filesystem::path& corpus_dir, const std::string& split);

/// Detection network input: DCE for single-dce, DCE then DW otherwise.
Volume detect_input(const CaseInputs& in, nets::DetectVariant v);

std::vector<train::TrainCase> liver_training_cases(std::span<const LoadedCase> cases);
std::vector<train::TrainCase> detect_training_cases(std::span<const LoadedCase> cases, nets::DetectVariant v);

struct Segmentation {
  Volume probability;
  LargestComponent liver;
};

Segmentation segment_liver(const nets::Network& liver_net, const CaseInputs& in, int jobs = 1);

/// Detection foreground probability for every voxel; liver masking is left
/// to postprocess_detect.
Volume detect_probability(const nets::Network& detect_net, const CaseInputs& in, nets::DetectVariant v, int jobs = 1);

/// Liver metrics of one prediction. An empty prediction against a nonempty
/// reference scores DSC 0, RVD -100 and HD95 infinity.
SegMetricReport evaluate_liver(const BinaryMask& pred, const BinaryMask& ref);

/// Network outputs of one case together with its reference lesions.
struct InferredCase {
  std::string id;
  Volume prob;         // detection foreground probability
  BinaryMask liver;    // post-processed liver segmentation
  BinaryMask lesions;  // reference
};

InferredCase infer_case(const nets::Network& liver_net, const nets::Network& detect_net, const LoadedCase& c,
                        nets::DetectVariant v, int jobs = 1);

struct CaseDetection {
  std::string id;
  std::size_t lesions = 0;
  DetectionMatch match;
};

struct DetectionSummary {
  std::vector<CaseDetection> cases;
  std::vector<LesionSize> sizes;  // every reference lesion with its detection flag
  std::size_t lesions = 0;
  std::size_t detected = 0;
  double mean_tpr = 0.0;  // over cases with at least one lesion
  double median_fpc = 0.0;
};

/// Post-processes every case at one operating point and matches the objects
/// against the reference lesions.
DetectionSummary evaluate_detection(std::span<const InferredCase> cases, const DetectPostConfig& cfg = {});

FrocCurve froc_curve(std::span<const InferredCase> cases, int jobs = 1);

}  // namespace hseg::pipeline
