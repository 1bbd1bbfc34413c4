#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sparsefit/eval.hpp"

namespace sparsefit {

double mean(std::span<const double> values);
// n - 1 denominator; 0 for fewer than two values.
double sample_stddev(std::span<const double> values);

struct Aggregate {
  std::size_t num_splits = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  double mean_nle = 0.0;
  double std_nle = 0.0;
  bool single_split = false;  // std reported as 0
};

// Throws ContractError on an empty list.
Aggregate aggregate(const std::vector<SplitResult>& results);

// Regularized incomplete beta function I_x(a, b).
double regularized_incomplete_beta(double x, double a, double b);

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  bool significant = false;  // p < 1e-2
};

inline constexpr double kSignificanceLevel = 1e-2;

// Unequal-variance two-sample t-test, two-sided. Needs at least two values
// per side. With zero variance on both sides: equal means give t = 0,
// p = 1; different means give an infinite t and p = 0.
TTestResult welch_t_test(std::span<const double> a, std::span<const double> b);

// (1 - percent/100) * score
double tradeoff_score(double percent_params, double mean_nle);

enum class Verdict { kYes, kWeakYes, kWeakNo, kNo };

Verdict parse_verdict(std::string_view text);
std::string to_string(Verdict v);
// yes 1, weak yes 2/3, weak no 1/3, no 0.
double verdict_value(Verdict v);

inline const std::array<std::string_view, 10> kShortcomingCategories = {
    "nonsensical",       "contradictory",       "lack of explanation", "incomplete explanation",
    "input repetition",  "hallucination",       "extra words at the end",
    "true but uncorrelated", "inaccurate",     "one word"};

struct HumanAnnotation {
  std::string example_id;
  std::string annotator_id;
  Verdict verdict = Verdict::kYes;
  std::vector<std::string> shortcomings;
};

// Line-delimited {example_id, annotator_id, verdict, shortcomings[]}.
// Throws DataError on unknown verdicts or categories, or on a non-yes
// verdict without shortcomings.
std::vector<HumanAnnotation> load_annotations(const std::filesystem::path& path);
std::vector<HumanAnnotation> parse_annotations(std::string_view text);

// Mean mapped verdict. Throws ContractError when empty.
double plausibility_to_numeric(std::span<const Verdict> verdicts);
double plausibility_to_numeric(const std::vector<HumanAnnotation>& annotations);

// Chance-corrected agreement over the four verdicts. Throws ContractError on
// length mismatch or empty input.
double cohen_kappa(std::span<const Verdict> first, std::span<const Verdict> second);

}  // namespace sparsefit
