#include <stdio.h>
#include <string.h>
#include "ccsd.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    CcsdStatus s_ = (call);                                                \
    if (s_ != CCSD_STATUS_OK) {                                            \
      const char *m_ = ccsd_last_error_message();                          \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, m_ ? m_ : "?");    \
      return 1;                                                            \
    }                                                                      \
  } while (0)

int main(void) {
  uint32_t bits[15];
  size_t count = 0;
  CHECK(ccsd_enumerate_combos(4, bits, 15, &count));
  if (count != 15 || bits[0] != 1 || bits[14] != 15) return 2;

  CcsdConfig *cfg = NULL;
  CHECK(ccsd_config_new(&cfg));
  CHECK(ccsd_config_set(cfg, "net.spatial_rank", "2"));
  CHECK(ccsd_config_set(cfg, "net.input_size", "8,8"));
  CHECK(ccsd_config_set(cfg, "net.depth", "2"));
  char buf[32];
  size_t needed = 0;
  CHECK(ccsd_config_get(cfg, "net.input_size", buf, sizeof buf, &needed));
  if (strcmp(buf, "8,8") != 0) return 3;
  if (ccsd_config_set(cfg, "net.width", "3") != CCSD_STATUS_CONFIG) return 4;

  CcsdModel *model = NULL;
  CHECK(ccsd_model_new(cfg, 1, &model));
  size_t n = 0, vox = 0;
  CHECK(ccsd_model_shape(model, &n, &vox));
  if (n != 4 || vox != 64) return 5;
  float vol[4 * 64];
  for (size_t i = 0; i < 4 * 64; i++) vol[i] = (float)(i % 7) / 7.0f;
  uint8_t labels[64];
  CHECK(ccsd_model_segment(model, vol, 4 * 64, 5u, labels, 64));
  for (size_t i = 0; i < 64; i++)
    if (labels[i] > 3) return 6;

  ccsd_model_free(model);
  ccsd_config_free(cfg);
  printf("ok %s\n", ccsd_version());
  return 0;
}
