#include "sparsefit/stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sparsefit/errors.hpp"

namespace sparsefit {

double mean(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double total = 0.0;
  for (double v : values) total += v;
  return total / static_cast<double>(values.size());
}

double sample_stddev(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

Aggregate aggregate(const std::vector<SplitResult>& results) {
  if (results.empty()) throw ContractError("aggregate: no split results");
  std::vector<double> acc, nle;
  for (const auto& r : results) {
    acc.push_back(r.accuracy);
    nle.push_back(r.mean_nle_score);
  }
  Aggregate a;
  a.num_splits = results.size();
  a.mean_acc = mean(acc);
  a.mean_nle = mean(nle);
  a.std_acc = sample_stddev(acc);
  a.std_nle = sample_stddev(nle);
  a.single_split = results.size() == 1;
  return a;
}

namespace {

// Continued fraction for the incomplete beta function (modified Lentz).
double beta_continued_fraction(double x, double a, double b) {
  constexpr int kMaxIterations = 500;
  constexpr double kEpsilon = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEpsilon) break;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double x, double a, double b) {
  if (!(a > 0.0) || !(b > 0.0)) throw ContractError("incomplete beta needs a, b > 0");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                           b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(x, a, b) / a;
  return 1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b;
}

TTestResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ContractError("welch_t_test needs >= 2 values per sample");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double ma = mean(a), mb = mean(b);
  const double sa = sample_stddev(a), sb = sample_stddev(b);
  const double qa = sa * sa / na, qb = sb * sb / nb;
  TTestResult r;
  if (qa + qb == 0.0) {
    r.df = na + nb - 2.0;
    if (ma == mb) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
  } else {
    r.t = (ma - mb) / std::sqrt(qa + qb);
    r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    r.p = regularized_incomplete_beta(r.df / (r.df + r.t * r.t), r.df / 2.0, 0.5);
  }
  r.significant = r.p < kSignificanceLevel;
  return r;
}

double tradeoff_score(double percent_params, double mean_nle) {
  return (1.0 - percent_params / 100.0) * mean_nle;
}

// ---------------------------------------------------------------------------
// Human evaluation

Verdict parse_verdict(std::string_view text) {
  if (text == "yes") return Verdict::kYes;
  if (text == "weak_yes" || text == "weak yes") return Verdict::kWeakYes;
  if (text == "weak_no" || text == "weak no") return Verdict::kWeakNo;
  if (text == "no") return Verdict::kNo;
  throw DataError("unknown verdict: " + std::string(text));
}

std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::kYes: return "yes";
    case Verdict::kWeakYes: return "weak_yes";
    case Verdict::kWeakNo: return "weak_no";
    case Verdict::kNo: return "no";
  }
  return "?";
}

double verdict_value(Verdict v) {
  switch (v) {
    case Verdict::kYes: return 1.0;
    case Verdict::kWeakYes: return 2.0 / 3.0;
    case Verdict::kWeakNo: return 1.0 / 3.0;
    case Verdict::kNo: return 0.0;
  }
  return 0.0;
}

std::vector<HumanAnnotation> parse_annotations(std::string_view text) {
  std::vector<HumanAnnotation> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "annotation line " + std::to_string(line_no) + ": ";
    try {
      const auto doc = nlohmann::json::parse(line);
      HumanAnnotation a;
      a.example_id = doc.at("example_id").get<std::string>();
      a.annotator_id = doc.at("annotator_id").get<std::string>();
      a.verdict = parse_verdict(doc.at("verdict").get<std::string>());
      a.shortcomings = doc.value("shortcomings", std::vector<std::string>{});
      for (const auto& s : a.shortcomings) {
        if (std::find(kShortcomingCategories.begin(), kShortcomingCategories.end(), s) ==
            kShortcomingCategories.end()) {
          throw DataError("unknown shortcoming category '" + s + "'");
        }
      }
      if (a.shortcomings.empty() && a.verdict != Verdict::kYes) {
        throw DataError("verdict '" + to_string(a.verdict) + "' needs at least one shortcoming");
      }
      out.push_back(std::move(a));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
  }
  return out;
}

std::vector<HumanAnnotation> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open annotations: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_annotations(buffer.str());
}

double plausibility_to_numeric(std::span<const Verdict> verdicts) {
  if (verdicts.empty()) throw ContractError("plausibility_to_numeric: no annotations");
  double total = 0.0;
  for (Verdict v : verdicts) total += verdict_value(v);
  return total / static_cast<double>(verdicts.size());
}

double plausibility_to_numeric(const std::vector<HumanAnnotation>& annotations) {
  std::vector<Verdict> verdicts;
  for (const auto& a : annotations) verdicts.push_back(a.verdict);
  return plausibility_to_numeric(verdicts);
}

double cohen_kappa(std::span<const Verdict> first, std::span<const Verdict> second) {
  if (first.size() != second.size()) {
    throw ContractError("cohen_kappa: annotator lists differ in length");
  }
  if (first.empty()) throw ContractError("cohen_kappa: no annotations");
  constexpr std::size_t kCategories = 4;
  std::array<double, kCategories> m1{}, m2{};
  double agree = 0.0;
  for (std::size_t i = 0; i < first.size(); ++i) {
    m1[static_cast<std::size_t>(first[i])] += 1.0;
    m2[static_cast<std::size_t>(second[i])] += 1.0;
    if (first[i] == second[i]) agree += 1.0;
  }
  const double n = static_cast<double>(first.size());
  const double po = agree / n;
  double pe = 0.0;
  for (std::size_t k = 0; k < kCategories; ++k) pe += (m1[k] / n) * (m2[k] / n);
  if (pe >= 1.0) return po >= 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

}  // namespace sparsefit
