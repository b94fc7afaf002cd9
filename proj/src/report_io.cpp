#include "cmitune/report_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace cmitune {

using nlohmann::json;

std::string cmi_sign_name(CmiSign sign) {
  switch (sign) {
    case CmiSign::min: return "min";
    case CmiSign::max: return "max";
    case CmiSign::off: return "off";
  }
  return "?";
}

std::string cmi_mode_name(CmiMode mode) {
  return mode == CmiMode::eq11_average ? "eq11_average" : "eq12_literal";
}

namespace {

CmiSign sign_from_name(const std::string& s) {
  if (s == "min") return CmiSign::min;
  if (s == "max") return CmiSign::max;
  if (s == "off") return CmiSign::off;
  throw DataError("report: unknown cmi_sign '" + s + "'");
}

CmiMode mode_from_name(const std::string& s) {
  if (s == "eq11_average") return CmiMode::eq11_average;
  if (s == "eq12_literal") return CmiMode::eq12_literal;
  throw DataError("report: unknown cmi_mode '" + s + "'");
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

uint64_t from_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

}  // namespace

std::string csv_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

json run_report_to_json(const RunReport& report, const json& config_echo) {
  const double inv_n = report.train_size > 0 ? 1.0 / static_cast<double>(report.train_size) : 0.0;
  json epochs = json::array();
  for (const EpochStats& e : report.epochs) {
    json row{{"epoch", e.epoch},          {"objective", e.objective}, {"l2", e.l2},
             {"l1", e.l1},                {"metric", e.metric},       {"clip_events", e.clip_events}};
    // losses follow the sum convention; means reported alongside
    row["l2_mean"] = e.l2 * inv_n;
    row["l1_mean"] = e.l1 * inv_n;
    row["cmi"] = e.cmi ? json(*e.cmi) : json(nullptr);
    epochs.push_back(std::move(row));
  }
  json doc{{"version", 1},
           {"kind", report.kind},
           {"seed", report.seed},
           {"cmi_sign", cmi_sign_name(report.cmi_sign)},
           {"lambda", report.lambda},
           {"gamma", report.gamma},
           {"cmi_mode", cmi_mode_name(report.cmi_mode)},
           {"metric_name", report.metric},
           {"train_size", report.train_size},
           {"dev_size", report.dev_size},
           {"epochs", std::move(epochs)},
           {"best_epoch", report.best_epoch},
           {"best_metric", report.best_metric},
           {"train_fingerprint", hex64(report.train_fingerprint)},
           {"dev_fingerprint", hex64(report.dev_fingerprint)}};
  doc["final_cmi_train"] = report.final_cmi_train ? json(*report.final_cmi_train) : json(nullptr);
  doc["final_cmi_dev"] = report.final_cmi_dev ? json(*report.final_cmi_dev) : json(nullptr);
  doc["final_centroids"] = report.final_centroids.empty() ? json(nullptr) : json(report.final_centroids);
  doc["config_echo"] = config_echo;
  return doc;
}

RunReport run_report_from_json(const json& doc) {
  RunReport r;
  r.kind = doc.at("kind").get<std::string>();
  r.seed = doc.at("seed").get<uint64_t>();
  r.cmi_sign = sign_from_name(doc.at("cmi_sign").get<std::string>());
  r.lambda = doc.at("lambda").get<double>();
  r.gamma = doc.at("gamma").get<double>();
  r.cmi_mode = mode_from_name(doc.at("cmi_mode").get<std::string>());
  r.metric = doc.at("metric_name").get<std::string>();
  r.train_size = doc.at("train_size").get<int64_t>();
  r.dev_size = doc.at("dev_size").get<int64_t>();
  for (const auto& row : doc.at("epochs")) {
    EpochStats e;
    e.epoch = row.at("epoch").get<int>();
    e.objective = row.at("objective").get<double>();
    e.l2 = row.at("l2").get<double>();
    e.l1 = row.at("l1").get<double>();
    e.metric = row.at("metric").get<double>();
    e.clip_events = row.at("clip_events").get<int64_t>();
    if (!row.at("cmi").is_null()) e.cmi = row.at("cmi").get<double>();
    r.epochs.push_back(std::move(e));
  }
  r.best_epoch = doc.at("best_epoch").get<int>();
  r.best_metric = doc.at("best_metric").get<double>();
  if (!doc.at("final_cmi_train").is_null()) r.final_cmi_train = doc.at("final_cmi_train").get<double>();
  if (!doc.at("final_cmi_dev").is_null()) r.final_cmi_dev = doc.at("final_cmi_dev").get<double>();
  if (!doc.at("final_centroids").is_null()) {
    r.final_centroids = doc.at("final_centroids").get<std::vector<std::vector<double>>>();
  }
  r.train_fingerprint = from_hex64(doc.at("train_fingerprint").get<std::string>());
  r.dev_fingerprint = from_hex64(doc.at("dev_fingerprint").get<std::string>());
  return r;
}

std::string metrics_csv(const RunReport& report) {
  const double inv_n = report.train_size > 0 ? 1.0 / static_cast<double>(report.train_size) : 0.0;
  std::ostringstream out;
  out << "epoch,objective,l2,l1,l2_mean,l1_mean,cmi,metric,clip_events\n";
  for (const EpochStats& e : report.epochs) {
    out << e.epoch << "," << csv_double(e.objective) << "," << csv_double(e.l2) << ","
        << csv_double(e.l1) << "," << csv_double(e.l2 * inv_n) << "," << csv_double(e.l1 * inv_n)
        << "," << (e.cmi ? csv_double(*e.cmi) : std::string()) << "," << csv_double(e.metric)
        << "," << e.clip_events << "\n";
  }
  return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw DataError("write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_run_artifacts(const RunReport& report, const json& config_echo,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "report.json", run_report_to_json(report, config_echo).dump(2) + "\n");
  json meta{{"wall_clock_sec", report.wall_clock_sec}};
  write_text_file(dir / "report.meta.json", meta.dump(2) + "\n");
  write_text_file(dir / "metrics.csv", metrics_csv(report));
}

}  // namespace cmitune
