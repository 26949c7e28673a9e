#pragma once

#include <map>
#include <string>
#include <vector>

#include "doremi/common.hpp"

namespace doremi {

// fp64 confusion-matrix accumulator indexed [truth][prediction].
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    void add(int truth, int prediction, double weight = 1.0);
    void merge(const ConfusionMatrix& other);

    int num_classes() const { return classes_; }
    double at(int truth, int prediction) const;
    double total() const;

    std::vector<double> per_class_iou() const;  // NaN for classes absent from GT
    double miou() const;                        // mean over classes present in GT
    double macc() const;                        // mean per-class recall, present classes
    double all_acc() const;                     // trace / total

private:
    int classes_;
    std::vector<double> m_;
};

// Normalized standard deviation of expert activation counts.
double alpha_metric(const std::vector<double>& counts);

// One routing trace row: enough to rebuild utilization histograms.
struct TraceRow {
    int token = 0;
    int domain_id = 0;
    double entropy = 0.0;
    int k = 0;
    std::vector<int> active;
};

void save_trace_csv(const std::string& path, const std::vector<TraceRow>& rows);
std::vector<TraceRow> load_trace_csv(const std::string& path);

// Per-domain activation fraction per expert; each histogram sums to one.
std::map<int, std::vector<double>> expert_utilization(const std::vector<TraceRow>& traces,
                                                      int num_experts);

struct MetricsReport {
    std::vector<double> per_class_iou;
    double miou = 0.0;
    double macc = 0.0;
    double all_acc = 0.0;
    double alpha = 0.0;  // from aggregate expert counts, 0 when no routing
    std::vector<double> expert_counts;                  // aggregate over layers
    std::map<int, std::vector<double>> utilization;     // domain -> per-expert fraction
    std::int64_t activated_params = 0;
    double throughput_scenes_per_s = 0.0;  // filled by bench only
    std::int64_t evaluated_points = 0;

    std::string to_json() const;  // deterministic field order and formatting
};

void save_report(const MetricsReport& report, const std::string& path);
void save_utilization_csv(const std::map<int, std::vector<double>>& utilization,
                          const std::string& path);
// Small static bar-chart rendering of the utilization CSV content.
void save_utilization_svg(const std::map<int, std::vector<double>>& utilization,
                          const std::string& path);

}  // namespace doremi
