#ifndef BIPROP_H
#define BIPROP_H

/* Generated by cbindgen from crates/ffi; do not edit. Regenerate with: cbindgen --crate biprop-ffi --output include/biprop.h */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>
#include <stdint.h>
#include <stddef.h>

/*
 Bumped whenever the ABI changes incompatibly.
 */
#define MPT_ABI_VERSION 1

/*
 Result of every fallible call. Zero is success.
 */
typedef enum MptStatus {
  MPT_STATUS_OK = 0,
  /*
   A required pointer argument was NULL.
   */
  MPT_STATUS_NULL_ARG = 1,
  /*
   A parameter failed validation.
   */
  MPT_STATUS_INVALID = 2,
  /*
   A buffer length does not match the network geometry.
   */
  MPT_STATUS_SHAPE = 3,
  /*
   The file could not be read or written.
   */
  MPT_STATUS_IO = 4,
  /*
   The file exists but does not parse as a checkpoint.
   */
  MPT_STATUS_FORMAT = 5,
  /*
   The checkpoint names an architecture this build cannot run.
   */
  MPT_STATUS_UNSUPPORTED = 6,
  /*
   Activation mode and input representation disagree.
   */
  MPT_STATUS_MODE = 7,
  /*
   A numeric failure (overflow, non-finite value) during inference.
   */
  MPT_STATUS_NUMERIC = 8,
  /*
   The embedded configuration is invalid.
   */
  MPT_STATUS_CONFIG = 9,
  /*
   A width-hypothesis violation from the construction API.
   */
  MPT_STATUS_WIDTH = 10,
  /*
   A string argument was not valid UTF-8.
   */
  MPT_STATUS_UTF8 = 11,
  /*
   An internal invariant failed; file a bug.
   */
  MPT_STATUS_INTERNAL = 12,
  /*
   A panic was caught at the boundary; the handle may be poisoned.
   */
  MPT_STATUS_PANIC = 13,
} MptStatus;

/*
 A loaded ticket: the regenerated network plus its input geometry.
 */
typedef struct MptNet MptNet;

/*
 A bit-packed program compiled from a loaded ticket.
 */
typedef struct MptPackedNet MptPackedNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 ABI version of this library; compare against `MPT_ABI_VERSION` from
 the header you compiled with.
 */
uint32_t mpt_abi_version(void);

/*
 Message for the most recent failure on this thread. Never NULL;
 empty when the last call succeeded. Valid until the next FFI call on
 the same thread.
 */
const char *mpt_last_error(void);

/*
 Loads a checkpoint file into a network handle. The seed stored in
 the checkpoint regenerates the frozen weights, so the handle
 evaluates bitwise-identically to the network that was saved.
 */
enum MptStatus mpt_net_load(const char *path, struct MptNet **out);

/*
 Frees a network handle. NULL is a no-op.
 */
void mpt_net_free(struct MptNet *net);

/*
 Floats per input item (channels * height * width for images).
 */
enum MptStatus mpt_net_input_len(const struct MptNet *net, size_t *out);

/*
 Floats per output item (the class count).
 */
enum MptStatus mpt_net_output_len(const struct MptNet *net, size_t *out);

/*
 Runs the dense forward pass over a batch. `x_len` must be a multiple
 of the input length; `out_len` must equal batch size times the
 output length.
 */
enum MptStatus mpt_net_forward(const struct MptNet *net,
                               const float *x,
                               size_t x_len,
                               float *out,
                               size_t out_len);

/*
 Runs the dense forward pass and writes the winning class per item.
 `labels_len` must equal the batch size.
 */
enum MptStatus mpt_net_argmax(const struct MptNet *net,
                              const float *x,
                              size_t x_len,
                              uint32_t *labels,
                              size_t labels_len);

/*
 Compiles the loaded ticket into a bit-packed program (sign and mask
 planes, folded norms).
 */
enum MptStatus mpt_net_pack(const struct MptNet *net, struct MptPackedNet **out);

/*
 Frees a packed handle. NULL is a no-op.
 */
void mpt_packed_free(struct MptPackedNet *packed);

/*
 Runs the packed forward pass over a batch; same length contract as
 `mpt_net_forward`.
 */
enum MptStatus mpt_packed_forward(const struct MptPackedNet *packed,
                                  const float *x,
                                  size_t x_len,
                                  float *out,
                                  size_t out_len);

/*
 Floats per output item of the packed program (the class count).
 */
enum MptStatus mpt_packed_output_len(const struct MptPackedNet *packed, size_t *out);

/*
 Bytes of bit-plane payload in the packed program (signs plus masks,
 excluding per-layer constants).
 */
enum MptStatus mpt_packed_payload_bytes(const struct MptPackedNet *packed, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIPROP_H */
