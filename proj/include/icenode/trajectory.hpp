#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "icenode/diff/parameter_set.hpp"
#include "icenode/ehr.hpp"
#include "icenode/model.hpp"

namespace icenode::traj {

inline constexpr std::size_t kDefaultResolution = 64;

// One sampled row. At every update time two rows share the time: the
// pre-update state (admission set, post_update false) first, then the
// post-update state.
struct TrajectoryRow {
  double time = 0.0;  // weeks
  std::vector<double> risks;  // one per selected code
  std::optional<std::size_t> admission;  // set on rows sampled at an admission time
  bool post_update = false;
};

struct RiskTrajectory {
  std::string subject_id;
  std::vector<ehr::CodeId> codes;
  std::vector<std::string> labels;  // code labels, header names in CSV
  std::vector<TrajectoryRow> rows;
  // observed[a][j]: codes[j] was recorded at admission a.
  std::vector<std::vector<std::uint8_t>> observed;
};

struct TrajectoryOptions {
  std::size_t resolution = kDefaultResolution;  // subintervals per inter-admission gap
  // Continue past the last admission (after its update) up to this time.
  std::optional<double> until;
};

/// Replays the integrate, decode, update cycle with dense output and decodes
/// `resolution + 1` equally spaced states per interval. The row at t_k before
/// the update carries exactly the prediction the loss uses for admission k.
RiskTrajectory sample_risk_trajectory(const model::Model& model, const diff::ParameterSet& params,
                                      const ehr::PatientRecord& patient,
                                      const std::vector<ehr::CodeId>& codes,
                                      const std::vector<std::string>& labels,
                                      const TrajectoryOptions& options = {});

/// One trajectory per listed patient, computed in parallel.
std::vector<RiskTrajectory> sample_risk_trajectories(
    const model::Model& model, const diff::ParameterSet& params,
    const std::vector<ehr::PatientRecord>& patients, const std::vector<std::size_t>& subset,
    const std::vector<ehr::CodeId>& codes, const std::vector<std::string>& labels,
    const TrajectoryOptions& options, int threads);

// CSV layout: header `time_weeks,risk:<label>...,observed:<label>...`.
// Risk cells use shortest round-trip formatting. Observed cells are 0/1 on
// admission rows and empty elsewhere; the pre-update row of an admission
// comes first.
void export_trajectory_csv(const std::filesystem::path& path, const RiskTrajectory& trajectory);

/// Reads a file written by export_trajectory_csv. Codes are not stored, so
/// only labels, rows and observed flags are restored; subject_id is empty.
RiskTrajectory read_trajectory_csv(const std::filesystem::path& path);

}  // namespace icenode::traj
