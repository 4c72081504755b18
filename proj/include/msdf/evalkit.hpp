#pragma once

// Automatic dialog metrics. Every metric works on Unicode characters with
// whitespace removed.

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace msdf {

std::vector<std::string> metric_chars(std::string_view text);

// Multiset character overlap F1 in [0, 1]; 0 when either side is empty.
double char_f1(std::string_view hyp, std::string_view ref);

// Sentence BLEU-n for n in {1, 2}. Unigram precision is clipped and
// unsmoothed, bigram precision uses add-one smoothing; brevity penalty
// exp(1 - |ref|/|hyp|) when the hypothesis is shorter. Empty hypothesis → 0.
double bleu_n(std::string_view hyp, std::string_view ref, int n);

// Unique over total character n-grams pooled across all hypotheses.
double distinct_n(std::span<const std::string> hyps, int n);

struct TaskMetrics {
  double f1 = 0.0;  // 0-100
  double bleu1 = 0.0;
  double bleu2 = 0.0;
  double distinct1 = 0.0;
  double distinct2 = 0.0;
  std::size_t samples = 0;

  nlohmann::json to_json() const;
  static TaskMetrics from_json(const nlohmann::json& j);
};

TaskMetrics evaluate_corpus(std::span<const std::string> hyps, std::span<const std::string> refs);

// F1/100 + BLEU1 + BLEU2 over task-averaged values.
double aggregate_score(double f1, double bleu1, double bleu2);
double aggregate_score(std::span<const TaskMetrics> tasks);

struct MetricsReport {
  std::map<std::string, TaskMetrics> tasks;
  TaskMetrics mean;  // task-averaged
  double score = 0.0;

  nlohmann::json to_json() const;
};

// Groups hypothesis/reference pairs by task name and fills every field.
MetricsReport build_report(std::span<const std::string> task_names,
                           std::span<const std::string> hyps, std::span<const std::string> refs);

}  // namespace msdf
