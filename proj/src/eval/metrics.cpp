// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdio>
#include <sstream>

#include "mare/error.hpp"
#include "mare/eval.hpp"
#include "mare/ops.hpp"

namespace mare {

namespace nx = numerics;
using nlohmann::json;

void PrfCounts::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gold) {
  if (pred.size() != gold.size()) {
    throw DimensionError("token_prf: prediction has " + std::to_string(pred.size()) + " tokens, gold has " +
                         std::to_string(gold.size()));
  }
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gold[i] != 0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
}

Prf PrfCounts::prf() const { return prf_from_counts(tp, fp, fn); }

Prf prf_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  Prf r;
  if (tp + fp > 0) r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  if (tp + fn > 0) r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  if (r.precision + r.recall > 0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

Prf token_prf(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gold) {
  PrfCounts c;
  c.add(pred, gold);
  return c.prf();
}

double sparsity(const std::vector<std::vector<std::uint8_t>>& masks) {
  std::size_t selected = 0, total = 0;
  for (const auto& m : masks) {
    total += m.size();
    for (auto v : m) selected += v != 0;
  }
  if (total == 0) throw ContractError("sparsity: empty corpus");
  return static_cast<double>(selected) / static_cast<double>(total);
}

Predictions predict(const MareModel& model, const EncodedDataset& data, TrainingMode mode, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  const std::size_t k = model.config().num_aspects, C = model.config().num_classes;
  if (data.num_aspects != k) throw ConfigError("dataset and model disagree on the number of aspects");
  nx::NoGradGuard no_grad;
  Predictions p;
  p.labels.assign(data.size(), std::vector<std::size_t>(k, 0));
  p.masks.assign(data.size(), std::vector<std::vector<std::uint8_t>>(k));

  // Writes one forward pass's decisions for `aspects` into p.
  auto collect = [&](const MareOutput& out, std::span<const std::size_t> idx) {
    const auto& m = out.final_mask();
    const std::size_t kp = out.aspects.size(), L = m.dim(2);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      for (std::size_t i = 0; i < kp; ++i) {
        const std::size_t a = out.aspects[i];
        const double* row = out.logits.values().data() + (b * kp + i) * C;
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
          if (row[c] > row[best]) best = c;
        }
        p.labels[idx[b]][a] = best;
        auto& mask = p.masks[idx[b]][a];
        mask.resize(data.ids[idx[b]].size());
        for (std::size_t t = 0; t < mask.size(); ++t) mask[t] = m[(b * kp + i) * L + t] != 0.0;
      }
    }
  };

  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t n = start; n < std::min(data.size(), start + batch_size); ++n) idx.push_back(n);
    const auto batch = make_batch(data, idx);
    if (mode == TrainingMode::kCollaborative) {
      collect(model.forward_collaborative(batch, {.stochastic = false}), idx);
    } else {
      for (std::size_t a = 0; a < k; ++a) collect(model.forward_multitask(batch, a, {.stochastic = false}), idx);
    }
  }
  return p;
}

bool RationaleReport::has_gold() const {
  for (const auto& a : aspects) {
    if (a.annotated > 0) return true;
  }
  return false;
}

RationaleReport score(const Predictions& pred, const EncodedDataset& data, Aggregation aggregation,
                      bool keep_examples) {
  const std::size_t k = data.num_aspects;
  if (pred.labels.size() != data.size() || pred.masks.size() != data.size()) {
    throw DimensionError("score: predictions do not match the dataset");
  }
  RationaleReport r;
  double f1_sum = 0.0;
  std::size_t f1_count = 0;
  for (std::size_t a = 0; a < k; ++a) {
    AspectMetrics m;
    m.aspect = a;
    std::size_t correct = 0;
    PrfCounts counts;
    Prf macro;
    for (std::size_t n = 0; n < data.size(); ++n) {
      const auto& label = data.labels[n][a];
      const auto& gold = data.rationales[n][a];
      const auto& mask = pred.masks[n][a];
      if (label) {
        ++m.labeled;
        correct += pred.labels[n][a] == *label;
      }
      if (label || gold) {
        m.tokens += mask.size();
        for (auto v : mask) m.selected += v != 0;
      }
      if (gold) {
        ++m.annotated;
        if (aggregation == Aggregation::kMicro) {
          counts.add(mask, *gold);
        } else {
          const auto e = token_prf(mask, *gold);
          macro.precision += e.precision;
          macro.recall += e.recall;
          macro.f1 += e.f1;
        }
      }
    }
    if (m.tokens > 0) m.sparsity = static_cast<double>(m.selected) / static_cast<double>(m.tokens);
    if (m.labeled > 0) m.accuracy = static_cast<double>(correct) / static_cast<double>(m.labeled);
    if (m.annotated > 0) {
      Prf prf = counts.prf();
      if (aggregation == Aggregation::kMacro) {
        const double inv = 1.0 / static_cast<double>(m.annotated);
        prf = {macro.precision * inv, macro.recall * inv, macro.f1 * inv};
      }
      m.precision = prf.precision;
      m.recall = prf.recall;
      m.f1 = prf.f1;
      f1_sum += prf.f1;
      ++f1_count;
    }
    r.aspects.push_back(m);
  }
  if (f1_count > 0) r.avg_f1 = f1_sum / static_cast<double>(f1_count);
  if (keep_examples) {
    for (std::size_t n = 0; n < data.size(); ++n) {
      ExampleSpans e;
      e.index = n;
      for (std::size_t a = 0; a < k; ++a) {
        e.spans.push_back(mask_spans(pred.masks[n][a]));
        e.predicted.push_back(pred.labels[n][a]);
      }
      r.examples.push_back(std::move(e));
    }
  }
  return r;
}

RationaleReport evaluate(const MareModel& model, const EncodedDataset& data, const EvalOptions& options) {
  auto r = score(predict(model, data, options.mode, options.batch_size), data, options.aggregation,
                 options.keep_examples);
  r.meta.mode = to_string(options.mode);
  r.meta.deletion = to_string(model.config().deletion);
  r.meta.init = to_string(model.config().init_strategy);
  return r;
}

ReportFormat parse_report_format(const std::string& text) {
  if (text == "json") return ReportFormat::kJson;
  if (text == "csv") return ReportFormat::kCsv;
  if (text == "markdown" || text == "md") return ReportFormat::kMarkdown;
  throw ConfigError("unknown report format '" + text + "' (expected json|csv|markdown)");
}

namespace {

std::optional<double> percent(const std::optional<double>& v) {
  if (!v) return std::nullopt;
  return std::round(*v * 1000.0) / 10.0;
}

std::string format_cell(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", *v);
  return buf;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

ReportTable report_table(const RationaleReport& report) {
  ReportTable t;
  for (const auto& a : report.aspects) {
    const std::string p = "A" + std::to_string(a.aspect) + " ";
    for (const char* name : {"S", "ACC", "P", "R", "F1"}) t.columns.push_back(p + name);
    t.values.push_back(percent(a.sparsity));
    t.values.push_back(percent(a.accuracy));
    t.values.push_back(percent(a.precision));
    t.values.push_back(percent(a.recall));
    t.values.push_back(percent(a.f1));
  }
  t.columns.push_back("Avg F1");
  t.values.push_back(percent(report.avg_f1));
  return t;
}

std::string render_table(const ReportTable& t, ReportFormat format) {
  std::ostringstream out;
  switch (format) {
    case ReportFormat::kCsv: {
      for (std::size_t i = 0; i < t.columns.size(); ++i) out << (i ? "," : "") << t.columns[i];
      out << '\n';
      for (std::size_t i = 0; i < t.values.size(); ++i) out << (i ? "," : "") << (t.values[i] ? format_cell(t.values[i]) : "");
      out << '\n';
      break;
    }
    case ReportFormat::kMarkdown: {
      out << '|';
      for (const auto& c : t.columns) out << ' ' << c << " |";
      out << "\n|";
      for (std::size_t i = 0; i < t.columns.size(); ++i) out << "---:|";
      out << "\n|";
      for (const auto& v : t.values) out << ' ' << format_cell(v) << " |";
      out << '\n';
      break;
    }
    case ReportFormat::kJson: {
      json values = json::array();
      for (const auto& v : t.values) values.push_back(optional_json(v));
      out << json{{"columns", t.columns}, {"values", values}}.dump(2) << '\n';
      break;
    }
  }
  return out.str();
}

json report_to_json(const RationaleReport& r) {
  const auto table = report_table(r);
  json values = json::array();
  for (const auto& v : table.values) values.push_back(optional_json(v));
  json aspects = json::array();
  for (const auto& a : r.aspects) {
    aspects.push_back({{"aspect", a.aspect},
                       {"labeled", a.labeled},
                       {"annotated", a.annotated},
                       {"tokens", a.tokens},
                       {"selected", a.selected},
                       {"S", optional_json(a.sparsity)},
                       {"ACC", optional_json(a.accuracy)},
                       {"P", optional_json(a.precision)},
                       {"R", optional_json(a.recall)},
                       {"F1", optional_json(a.f1)}});
  }
  json examples = json::array();
  for (const auto& e : r.examples) {
    json per = json::array();
    for (std::size_t a = 0; a < e.spans.size(); ++a) {
      per.push_back({{"spans", e.spans[a]}, {"predicted", e.predicted[a]}});
    }
    examples.push_back({{"index", e.index}, {"aspects", per}});
  }
  return {{"meta",
           {{"seed", r.meta.seed},
            {"config_hash", r.meta.config_hash},
            {"mode", r.meta.mode},
            {"deletion", r.meta.deletion},
            {"init", r.meta.init}}},
          {"table", {{"columns", table.columns}, {"values", values}}},
          {"aspects", aspects},
          {"avg_f1", optional_json(r.avg_f1)},
          {"examples", examples},
          {"diagnostics", r.diagnostics}};
}

std::string render_report(const RationaleReport& report, ReportFormat format) {
  std::size_t scored = 0;
  for (const auto& a : report.aspects) scored += a.tokens + a.labeled;
  if (report.aspects.empty() || scored == 0) throw ContractError("render_report: report covers no examples");
  if (format == ReportFormat::kJson) return report_to_json(report).dump(2) + "\n";
  return render_table(report_table(report), format);
}

ReportTable table_from_json(const json& j) {
  const auto& t = j.contains("table") ? j["table"] : j;
  ReportTable out;
  try {
    out.columns = t.at("columns").get<std::vector<std::string>>();
    for (const auto& v : t.at("values")) {
      out.values.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("report table: ") + e.what());
  }
  if (out.columns.size() != out.values.size()) throw SchemaError("report table: column/value count mismatch");
  return out;
}

ReportTable table_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string header, row;
  if (!std::getline(in, header) || !std::getline(in, row)) throw SchemaError("report csv: expected header and row");
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream s(line);
    while (std::getline(s, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  ReportTable out;
  out.columns = split(header);
  for (const auto& c : split(row)) {
    if (c.empty() || c == "-") {
      out.values.emplace_back();
    } else {
      try {
        out.values.emplace_back(std::stod(c));
      } catch (const std::exception&) {
        throw SchemaError("report csv: bad value '" + c + "'");
      }
    }
  }
  if (out.columns.size() != out.values.size()) throw SchemaError("report csv: column/value count mismatch");
  return out;
}

}  // namespace mare
