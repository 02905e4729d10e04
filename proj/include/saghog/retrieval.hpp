#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace saghog {

// l2-normalize each encoding, sum-pool, power-normalize sign(x)|x|^alpha,
// final l2 norm. Permutation invariant; throws on an empty set.
std::vector<float> aggregate_page(const std::vector<std::vector<float>>& encodings,
                                  double alpha = 0.4);

struct WhiteningModel {
  std::vector<double> mean;        // [src_dim]
  std::vector<double> projection;  // [out_dim x src_dim], rows ordered by descending eigenvalue
  int src_dim = 0;
  int out_dim = 0;
  double eps = 1e-8;
  std::string warning;  // set when d was reduced to the numerical rank
};

// PCA whitening fitted on training descriptors only: center, eigendecompose
// the covariance, keep the top-d axes scaled by 1/sqrt(lambda + eps).
WhiteningModel fit_whitening(const std::vector<std::vector<float>>& train, int d, double eps = 1e-8);

// Projection + scaling without the final norm (covariance checks use this).
std::vector<float> whiten(const WhiteningModel& model, const std::vector<float>& x);
// whiten + final unit norm: the GlobalDescriptor vector.
std::vector<float> apply_whitening(const WhiteningModel& model, const std::vector<float>& x);

struct GlobalDescriptor {
  std::string page_id;
  std::vector<float> vec;  // unit norm
};

struct RankedList {
  std::string query_id;
  std::vector<std::string> gallery_ids;  // descending similarity
  std::vector<double> scores;
};

// Leave-one-out cosine ranking; ties break by ascending gallery id.
std::vector<RankedList> rank_all(const std::vector<GlobalDescriptor>& gallery);

enum class RetrievalTask { Writer, Page };

struct ItemLabels {
  std::string writer;
  std::string page;  // source document id in fragment scenarios
};

struct Metrics {
  double map = 0.0;
  double top1 = 0.0;
  int n_queries = 0;
  int excluded_queries = 0;  // queries with no relevant gallery item
};

// AP per query = mean of precision at each relevant rank; relevance is equal
// writer id (writer task) or equal page id (page task, fragment scenarios).
Metrics evaluate(const std::vector<RankedList>& ranked,
                 const std::map<std::string, ItemLabels>& labels, RetrievalTask task);

// Descriptor store: SGHD payload plus a JSON-lines id index.
void write_descriptors(const std::string& sghd_path, const std::string& index_path,
                       const std::vector<GlobalDescriptor>& descs, const std::string& config_hash);
std::vector<GlobalDescriptor> read_descriptors(const std::string& sghd_path,
                                               const std::string& index_path,
                                               std::string* config_hash_out = nullptr);

// Cyclic Jacobi eigensolver for symmetric matrices (row-major n x n).
// Eigenvalues descend; eigenvectors fill the rows of `vectors`.
void symmetric_eigen(std::vector<double> matrix, int n, std::vector<double>& values,
                     std::vector<double>& vectors);

}  // namespace saghog
