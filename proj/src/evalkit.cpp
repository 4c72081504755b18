#include "msdf/evalkit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "msdf/vocab.hpp"

namespace msdf {

namespace {

bool is_space_char(const std::string& c) {
  if (c.size() == 1) return std::isspace(static_cast<unsigned char>(c[0])) != 0;
  return c == "\xE3\x80\x80" || c == "\xC2\xA0";  // U+3000, U+00A0
}

std::vector<std::string> ngrams(const std::vector<std::string>& chars, int n) {
  std::vector<std::string> out;
  const auto k = static_cast<std::size_t>(n);
  if (chars.size() < k) return out;
  out.reserve(chars.size() - k + 1);
  for (std::size_t i = 0; i + k <= chars.size(); ++i) {
    std::string g;
    for (std::size_t j = 0; j < k; ++j) {
      if (j) g.push_back('\x1f');
      g += chars[i + j];
    }
    out.push_back(std::move(g));
  }
  return out;
}

std::unordered_map<std::string, std::size_t> counts(const std::vector<std::string>& items) {
  std::unordered_map<std::string, std::size_t> m;
  for (const auto& s : items) ++m[s];
  return m;
}

// Clipped matches and hypothesis n-gram total.
std::pair<std::size_t, std::size_t> clipped_matches(const std::vector<std::string>& hyp,
                                                    const std::vector<std::string>& ref, int n) {
  const auto h = ngrams(hyp, n);
  const auto r = counts(ngrams(ref, n));
  std::size_t matched = 0;
  for (const auto& [g, c] : counts(h)) {
    auto it = r.find(g);
    if (it != r.end()) matched += std::min(c, it->second);
  }
  return {matched, h.size()};
}

}  // namespace

std::vector<std::string> metric_chars(std::string_view text) {
  auto chars = utf8_chars(text);
  std::erase_if(chars, is_space_char);
  return chars;
}

double char_f1(std::string_view hyp, std::string_view ref) {
  const auto h = metric_chars(hyp);
  const auto r = metric_chars(ref);
  if (h.empty() || r.empty()) return 0.0;
  const auto hc = counts(h);
  const auto rc = counts(r);
  std::size_t overlap = 0;
  for (const auto& [c, n] : hc) {
    auto it = rc.find(c);
    if (it != rc.end()) overlap += std::min(n, it->second);
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(h.size());
  const double rcl = static_cast<double>(overlap) / static_cast<double>(r.size());
  return 2.0 * p * rcl / (p + rcl);
}

double bleu_n(std::string_view hyp, std::string_view ref, int n) {
  if (n != 1 && n != 2) throw std::invalid_argument("bleu_n: n must be 1 or 2");
  const auto h = metric_chars(hyp);
  const auto r = metric_chars(ref);
  if (h.empty()) return 0.0;

  const auto [m1, t1] = clipped_matches(h, r, 1);
  const double p1 = static_cast<double>(m1) / static_cast<double>(t1);
  double log_mean = 0.0;
  if (n == 1) {
    if (m1 == 0) return 0.0;
    log_mean = std::log(p1);
  } else {
    if (m1 == 0) return 0.0;
    const auto [m2, t2] = clipped_matches(h, r, 2);
    const double p2 = (static_cast<double>(m2) + 1.0) / (static_cast<double>(t2) + 1.0);
    log_mean = 0.5 * (std::log(p1) + std::log(p2));
  }
  const double bp = h.size() < r.size()
                        ? std::exp(1.0 - static_cast<double>(r.size()) / static_cast<double>(h.size()))
                        : 1.0;
  return bp * std::exp(log_mean);
}

double distinct_n(std::span<const std::string> hyps, int n) {
  if (n < 1) throw std::invalid_argument("distinct_n: n must be positive");
  std::set<std::string> unique;
  std::size_t total = 0;
  for (const auto& hyp : hyps) {
    const auto grams = ngrams(metric_chars(hyp), n);
    total += grams.size();
    unique.insert(grams.begin(), grams.end());
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

nlohmann::json TaskMetrics::to_json() const {
  return {{"f1", f1},           {"bleu1", bleu1},         {"bleu2", bleu2},
          {"distinct1", distinct1}, {"distinct2", distinct2}, {"samples", samples}};
}

TaskMetrics TaskMetrics::from_json(const nlohmann::json& j) {
  TaskMetrics m;
  m.f1 = j.value("f1", 0.0);
  m.bleu1 = j.value("bleu1", 0.0);
  m.bleu2 = j.value("bleu2", 0.0);
  m.distinct1 = j.value("distinct1", 0.0);
  m.distinct2 = j.value("distinct2", 0.0);
  m.samples = j.value("samples", std::size_t{0});
  return m;
}

TaskMetrics evaluate_corpus(std::span<const std::string> hyps, std::span<const std::string> refs) {
  if (hyps.size() != refs.size()) {
    throw std::invalid_argument("evaluate_corpus: " + std::to_string(hyps.size()) +
                                " hypotheses for " + std::to_string(refs.size()) + " references");
  }
  TaskMetrics m;
  m.samples = hyps.size();
  if (hyps.empty()) return m;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    m.f1 += char_f1(hyps[i], refs[i]);
    m.bleu1 += bleu_n(hyps[i], refs[i], 1);
    m.bleu2 += bleu_n(hyps[i], refs[i], 2);
  }
  const auto n = static_cast<double>(hyps.size());
  m.f1 = 100.0 * m.f1 / n;
  m.bleu1 /= n;
  m.bleu2 /= n;
  m.distinct1 = distinct_n(hyps, 1);
  m.distinct2 = distinct_n(hyps, 2);
  return m;
}

double aggregate_score(double f1, double bleu1, double bleu2) { return f1 / 100.0 + bleu1 + bleu2; }

double aggregate_score(std::span<const TaskMetrics> tasks) {
  if (tasks.empty()) return 0.0;
  double f1 = 0.0, b1 = 0.0, b2 = 0.0;
  for (const auto& t : tasks) {
    f1 += t.f1;
    b1 += t.bleu1;
    b2 += t.bleu2;
  }
  const auto n = static_cast<double>(tasks.size());
  return aggregate_score(f1 / n, b1 / n, b2 / n);
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per_task = nlohmann::json::object();
  for (const auto& [name, m] : tasks) per_task[name] = m.to_json();
  return {{"tasks", per_task}, {"mean", mean.to_json()}, {"score", score}};
}

MetricsReport build_report(std::span<const std::string> task_names,
                           std::span<const std::string> hyps, std::span<const std::string> refs) {
  if (task_names.size() != hyps.size() || hyps.size() != refs.size()) {
    throw std::invalid_argument("build_report: task, hypothesis and reference counts differ");
  }
  std::map<std::string, std::pair<std::vector<std::string>, std::vector<std::string>>> groups;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    auto& g = groups[task_names[i]];
    g.first.push_back(hyps[i]);
    g.second.push_back(refs[i]);
  }
  MetricsReport report;
  std::vector<TaskMetrics> all;
  for (const auto& [name, g] : groups) {
    report.tasks[name] = evaluate_corpus(g.first, g.second);
    all.push_back(report.tasks[name]);
  }
  if (!all.empty()) {
    const auto n = static_cast<double>(all.size());
    for (const auto& t : all) {
      report.mean.f1 += t.f1 / n;
      report.mean.bleu1 += t.bleu1 / n;
      report.mean.bleu2 += t.bleu2 / n;
      report.mean.distinct1 += t.distinct1 / n;
      report.mean.distinct2 += t.distinct2 / n;
      report.mean.samples += t.samples;
    }
  }
  report.score = aggregate_score(all);
  return report;
}

}  // namespace msdf
