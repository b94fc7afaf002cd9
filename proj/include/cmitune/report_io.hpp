#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "cmitune/trainer.hpp"

namespace cmitune {

std::string cmi_sign_name(CmiSign sign);
std::string cmi_mode_name(CmiMode mode);

// Deterministic JSON form of a run report. Wall-clock time is deliberately
// excluded; it goes into the meta sidecar.
nlohmann::json run_report_to_json(const RunReport& report, const nlohmann::json& config_echo);
RunReport run_report_from_json(const nlohmann::json& doc);

void write_run_artifacts(const RunReport& report, const nlohmann::json& config_echo,
                         const std::filesystem::path& dir);

// Per-epoch CSV: epoch,objective,l2,l1,cmi,metric,clip_events.
std::string metrics_csv(const RunReport& report);

// Fixed "%.17g" double formatting shared by every CSV writer.
std::string csv_double(double v);

void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace cmitune
