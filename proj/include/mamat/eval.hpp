#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mamat/tensor.hpp"

namespace mamat::eval {

inline constexpr double kPsnrCap = 100.0;

// 10 log10(1 / MSE) for values in [0, 1]; identical inputs give kPsnrCap.
double psnr(const Tensor<float>& a, const Tensor<float>& b);

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

// Mean Gaussian-weighted local SSIM over the valid region. Frames are H x W or
// C x H x W (channels are scored separately and averaged).
double ssim(const Tensor<float>& a, const Tensor<float>& b, const SsimOptions& opt = {});

struct Box {
  std::string image_id;
  int class_id = 0;
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
  std::optional<double> score;  // detections only

  double area() const { return (x_max - x_min) * (y_max - y_min); }
  void validate() const;
};

double iou(const Box& a, const Box& b);

// Detections are processed in the given order (callers sort by descending
// score). Each takes the unused, non-ignored ground truth with the highest
// IoU >= thresh; failing that, an unused ignored one. Ties go to the earlier box.
enum class MatchResult { tp, fp, ignored };
std::vector<MatchResult> match_detections(const std::vector<Box>& dets, const std::vector<Box>& gts,
                                          double iou_thresh, const std::vector<bool>& gt_ignored = {});

// 101-point interpolated AP of a score-ordered TP (true) / FP (false) sequence.
// Returns nullopt when n_gt == 0 (the class is skipped).
std::optional<double> average_precision(const std::vector<bool>& tp, std::size_t n_gt);

inline constexpr std::array<double, 10> kIouThresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                                          0.75, 0.80, 0.85, 0.90, 0.95};
inline constexpr double kSmallArea = 32.0 * 32.0;

enum class SizeFilter { all, small };

struct ApResult {
  std::map<int, std::array<double, 10>> per_class;  // classes with at least one counted GT
  std::array<double, 10> per_threshold{};            // mean over classes
  double mean = 0.0;                                 // AP@[IoU=0.5:0.95]; NaN if no class counted
};

// Detections referencing an image id absent from the ground truth are an error.
ApResult map_evaluate(const std::vector<Box>& dets, const std::vector<Box>& gts, SizeFilter filter = SizeFilter::all);

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// CSV with header image_id,class_id,x_min,y_min,x_max,y_max[,score].
std::vector<Box> read_boxes(std::istream& is, bool with_score);
std::vector<Box> read_boxes(const std::filesystem::path& path, bool with_score);
void write_boxes(std::ostream& os, const std::vector<Box>& boxes);

}  // namespace mamat::eval
