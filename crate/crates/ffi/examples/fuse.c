/* Fuses two detections of one image and prints the result.
 *
 *   cargo build -p sfodkit-ffi
 *   cc -Icrates/ffi/include crates/ffi/examples/fuse.c \
 *      -Ltarget/debug -lsfodkit_ffi -o fuse && LD_LIBRARY_PATH=target/debug ./fuse
 */
#include <stdio.h>

#include "sfodkit.h"

static int check(enum SfodStatus s) {
  if (s != SFOD_STATUS_OK) {
    fprintf(stderr, "error %d: %s\n", (int)s, sfod_last_error());
    return 1;
  }
  return 0;
}

int main(void) {
  SfodDetections *a = NULL, *b = NULL;
  SfodFused *fused = NULL;
  const double box_a[4] = {0, 0, 10, 10}, probs_a[2] = {0.9, 0.1};
  const double box_b[4] = {0, 0, 10, 11}, probs_b[2] = {0.6, 0.4};

  if (check(sfod_detections_new(2, &a)) || check(sfod_detections_new(2, &b)) ||
      check(sfod_detections_push(a, box_a, probs_a, 2)) ||
      check(sfod_detections_push(b, box_b, probs_b, 2)) ||
      check(sfod_fuse(a, b, SFOD_METHOD_DEPF, 0.7, 1e-8, &fused)))
    return 1;

  for (size_t i = 0; i < sfod_fused_len(fused); i++) {
    double box[4], probs[2];
    size_t label;
    if (check(sfod_fused_get(fused, i, box, probs, 2, &label)))
      return 1;
    printf("[%.3f %.3f %.3f %.3f] class %zu p=%.3f\n", box[0], box[1], box[2], box[3],
           label, probs[label]);
  }

  const double bad[4] = {5, 5, 1, 1};
  double v;
  if (sfod_iou(bad, box_a, &v) != SFOD_STATUS_OK)
    printf("rejected: %s\n", sfod_last_error());

  sfod_fused_free(fused);
  sfod_detections_free(a);
  sfod_detections_free(b);
  return 0;
}
