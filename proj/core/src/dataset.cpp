#include "cpfn/dataset.hpp"

#include <cmath>

namespace cpfn {

void Dataset::validate() const {
  if (X.rows != Y.rows) throw DataError("dataset: X and Y row counts differ");
  if (X.rows == 0) throw EmptyDataset("dataset has no rows");
  if (!x_columns.empty() && x_columns.size() != X.cols)
    throw DataError("dataset: x column metadata size mismatch");
  if (!y_columns.empty() && y_columns.size() != Y.cols)
    throw DataError("dataset: y column metadata size mismatch");
  for (double v : X.data)
    if (std::isnan(v)) throw DataError("dataset: NaN in X after ingestion");
  for (double v : Y.data)
    if (std::isnan(v)) throw DataError("dataset: NaN in Y after ingestion");
}

}  // namespace cpfn
