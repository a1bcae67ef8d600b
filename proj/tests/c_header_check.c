/* Compiles the public header as C and makes a few calls through it. */
#include <stdio.h>

#include "civbalance/civbalance.h"

int main(void) {
  civb_dataset* d = NULL;
  civb_status s = civb_dataset_synthetic(2, 1, 100, 1, 1.0, &d);
  if (s != CIVB_OK) {
    fprintf(stderr, "%s: %s\n", civb_status_name(s), civb_last_error());
    return 1;
  }
  double ace = 0.0;
  s = civb_dataset_true_ace(d, &ace);
  civb_dataset_free(d);
  if (s != CIVB_OK || ace != ace) return 1;
  printf("%s %zu\n", civb_version(), (size_t)sizeof(civb_estimate));
  return 0;
}
