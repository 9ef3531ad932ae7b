#ifndef CODS_H
#define CODS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

/**
 * Result of every call.
 */
typedef enum CodsStatus {
  CODS_STATUS_OK = 0,
  CODS_STATUS_NULL_POINTER = 1,
  CODS_STATUS_INVALID_ARGUMENT = 2,
  CODS_STATUS_CONFIG = 3,
  CODS_STATUS_IO = 4,
  CODS_STATUS_CONTRACT = 5,
  CODS_STATUS_DOMAIN = 6,
  CODS_STATUS_FORMAT = 7,
  CODS_STATUS_PANIC = 8,
} CodsStatus;

/**
 * Outcome of one suction attempt.
 */
typedef enum CodsPickKind {
  CODS_PICK_KIND_SUCCESS = 0,
  CODS_PICK_KIND_PARTIAL_SEAL = 1,
  CODS_PICK_KIND_MISS = 2,
  CODS_PICK_KIND_COLLISION = 3,
  CODS_PICK_KIND_UNREACHABLE = 4,
} CodsPickKind;

/**
 * Descriptor network handle.
 */
typedef struct CodsDescriptor CodsDescriptor;

/**
 * Bin-picking environment handle.
 */
typedef struct CodsEnv CodsEnv;

typedef struct CodsStepResult {
  double reward;
  bool done;
  enum CodsPickKind kind;
  /**
   * Instance id of the picked object, 0 when nothing was picked.
   */
  uint32_t picked_id;
  uint32_t remaining;
} CodsStepResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cods_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next failing call.
 */
const char *cods_last_error_message(void);

/**
 * Creates an environment from a JSON config (NULL selects the desk-scale defaults).
 */
enum CodsStatus cods_env_new(const char *config_json, struct CodsEnv **out);

void cods_env_free(struct CodsEnv *env);

/**
 * Starts an episode; writes the observation size.
 */
enum CodsStatus cods_env_reset(struct CodsEnv *env,
                               uint64_t seed,
                               uint32_t *width,
                               uint32_t *height);

/**
 * Copies the depth image (meters, row-major, 0 = no return) into `out[len]`.
 */
enum CodsStatus cods_env_depth(struct CodsEnv *env, float *out, size_t len);

/**
 * Copies the RGB image (row-major, 3 bytes per pixel) into `out[len]`.
 */
enum CodsStatus cods_env_rgb(struct CodsEnv *env, uint8_t *out, size_t len);

/**
 * Writes 1 for pickable pixels and 0 elsewhere into `out[len]`.
 */
enum CodsStatus cods_env_action_mask(struct CodsEnv *env, uint8_t *out, size_t len);

/**
 * Attempts a pick at pixel (`x`, `y`).
 */
enum CodsStatus cods_env_step(struct CodsEnv *env,
                              int32_t x,
                              int32_t y,
                              struct CodsStepResult *out);

/**
 * Loads a descriptor checkpoint.
 */
enum CodsStatus cods_descriptor_load(const char *path, struct CodsDescriptor **out);

void cods_descriptor_free(struct CodsDescriptor *desc);

/**
 * Descriptor dimension, or 0 for a NULL handle.
 */
uint32_t cods_descriptor_dim(const struct CodsDescriptor *desc);

/**
 * Describes the environment's current observation: `width·height·dim` floats, pixel-major.
 */
enum CodsStatus cods_descriptor_describe(struct CodsDescriptor *desc,
                                         struct CodsEnv *env,
                                         float *out,
                                         size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CODS_H */
