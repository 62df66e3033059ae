#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace octcvd {

struct FeatureMatrix {
    std::vector<std::string> names;    // unique column names
    std::vector<std::string> row_ids;  // optional subject ids, parallel to rows
    std::int64_t n_rows = 0;
    std::int64_t n_cols = 0;
    std::vector<double> values;  // row-major
    std::vector<int> labels;     // 0/1, CVD+ = 1

    double at(std::int64_t r, std::int64_t c) const {
        return values[static_cast<std::size_t>(r * n_cols + c)];
    }
    double& at(std::int64_t r, std::int64_t c) {
        return values[static_cast<std::size_t>(r * n_cols + c)];
    }
    void validate() const;
    std::int64_t column_index(const std::string& name) const;  // -1 if absent
    // Column subset by name; throws naming the first missing column.
    FeatureMatrix select(const std::vector<std::string>& columns) const;
};

struct ForestHp {
    std::int64_t n_trees = 100;
    std::int64_t max_depth = -1;  // -1: unlimited
    std::int64_t min_samples_leaf = 1;
    std::int64_t features_per_split = 0;  // 0: ceil(sqrt(d))
    std::uint64_t seed = 1;
};

struct TreeNode {
    std::int32_t feature = -1;  // -1 marks a leaf
    double threshold = 0.0;     // go left when value <= threshold
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::int32_t count0 = 0;  // training samples reaching the node
    std::int32_t count1 = 0;
};

struct DecisionTree {
    std::vector<TreeNode> nodes;
    int predict(const double* row, std::int64_t stride,
                const std::vector<std::int64_t>& column_map) const;
    int train_depth = 0;
};

struct ForestModel {
    ForestHp hp;
    std::vector<std::string> feature_names;      // training columns, fixes tree feature indices
    std::vector<std::string> selected_features;  // RFE result carried with the model
    std::vector<DecisionTree> trees;
};

// Bootstrap-sampled trees with Gini splits over ceil(sqrt(d)) random
// candidate features per node (configurable). Deterministic under hp.seed.
ForestModel fit_forest(const FeatureMatrix& data, const ForestHp& hp);

// Majority-vote probability: fraction of trees voting class 1. Rows must
// contain every model feature by name.
std::vector<double> predict_proba(const ForestModel& model, const FeatureMatrix& rows);

// Mean-decrease-impurity importance per model feature, normalized to sum 1.
std::vector<double> feature_importance(const ForestModel& model);

// Recursive feature elimination with step size 1: refits and drops the
// lowest-importance feature until k remain. Ties drop by name descending.
std::vector<std::string> rfe_select(const FeatureMatrix& data, const ForestHp& hp, std::int64_t k);

struct GridPoint {
    std::int64_t n_trees = 100;
    std::int64_t max_depth = -1;
    std::int64_t min_samples_leaf = 1;
};

struct CvCell {
    GridPoint point;
    std::vector<double> fold_auc;
    double mean_auc = 0.0;
};

struct GridSearchResult {
    GridPoint best;
    std::vector<CvCell> table;
};

std::vector<GridPoint> default_grid();

// Stratified k-fold grid search maximizing mean validation AUC. Ties break
// toward fewer trees, then shallower depth, then grid order.
GridSearchResult grid_search_cv(const FeatureMatrix& data, const std::vector<GridPoint>& grid,
                                int folds, std::uint64_t seed);

void save_forest(const std::filesystem::path& path, const ForestModel& model);
ForestModel load_forest(const std::filesystem::path& path);
void write_cv_table_csv(const std::filesystem::path& path, const GridSearchResult& result);

}  // namespace octcvd
