#ifndef RAILTRACE_H
#define RAILTRACE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define RT_OK 0

// Invalid configuration, scenario, or argument value.
#define RT_ERR_CONFIG 1

// Unreadable or malformed input data.
#define RT_ERR_DATA 2

// An internal consistency check failed.
#define RT_ERR_INTERNAL 3

// A required pointer argument was null.
#define RT_ERR_NULL 4

// A Rust panic was caught at the boundary.
#define RT_ERR_PANIC 5

// The call needs a completed inference run.
#define RT_ERR_STATE 6

// Opaque pipeline handle.
typedef struct rt_pipeline rt_pipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or null.
//
// The pointer stays valid until the next library call on the same thread.
const char *rt_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void rt_string_free(char *s);

// Creates a pipeline from a JSON config document. Null or an empty
// string gives the defaults. Relative paths resolve against the process
// working directory.
//
// # Safety
// `config_json` must be null or a NUL-terminated string; `out` must be writable.
int32_t rt_pipeline_new(const char *config_json, rt_pipeline **out);

// Creates a pipeline from a config file; relative paths inside it resolve
// against the file's directory.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
int32_t rt_pipeline_new_from_file(const char *path, rt_pipeline **out);

// Creates a pipeline over explicit AFC, AVL and topology files.
// `ground_truth` may be null.
//
// # Safety
// Path arguments must be NUL-terminated strings (or null where allowed);
// `out` must be writable.
int32_t rt_pipeline_new_from_files(const char *afc,
                                   const char *avl,
                                   const char *topology,
                                   const char *ground_truth,
                                   rt_pipeline **out);

// Frees a pipeline. Null is ignored.
//
// # Safety
// `p` must come from an `rt_pipeline_new*` call and not have been freed.
void rt_pipeline_free(rt_pipeline *p);

// Sets the output directory used by the run and simulate calls.
//
// # Safety
// `p` must be a live handle; `dir` a NUL-terminated string.
int32_t rt_pipeline_set_output_dir(rt_pipeline *p, const char *dir);

// Overrides the scenario seed.
//
// # Safety
// `p` must be a live handle.
int32_t rt_pipeline_set_seed(rt_pipeline *p, uint64_t seed);

// Writes a synthetic scenario (AFC, AVL, topology, ground truth) to the
// output directory.
//
// # Safety
// `p` must be a live handle.
int32_t rt_pipeline_simulate(rt_pipeline *p);

// Runs inference and writes its output files. Without input files in the
// config, a scenario is simulated first.
//
// # Safety
// `p` must be a live handle.
int32_t rt_pipeline_run(rt_pipeline *p);

// Runs inference and scores it against ground truth. Either out-pointer
// may be null.
//
// # Safety
// `p` must be a live handle; non-null out-pointers must be writable.
int32_t rt_pipeline_evaluate(rt_pipeline *p, double *accuracy, double *baseline_accuracy);

// Number of itineraries from the last run.
//
// # Safety
// `p` must be a live handle; `count` writable.
int32_t rt_pipeline_itinerary_count(rt_pipeline *p, size_t *count);

// Itinerary `index` as a JSON object; free with [`rt_string_free`].
//
// # Safety
// `p` must be a live handle; `json` writable.
int32_t rt_pipeline_itinerary_json(rt_pipeline *p, size_t index, char **json);

// Fitted models of the last run as JSON; free with [`rt_string_free`].
//
// # Safety
// `p` must be a live handle; `json` writable.
int32_t rt_pipeline_models_json(rt_pipeline *p, char **json);

// `KL(N(mu_p, sigma2_p) ‖ N(mu_q, sigma2_q))` in nats.
//
// # Safety
// `out` must be writable.
int32_t rt_kl_normal(double mu_p, double sigma2_p, double mu_q, double sigma2_q, double *out);

// Normal density at `x`.
//
// # Safety
// `out` must be writable.
int32_t rt_normal_pdf(double x, double mu, double sigma2, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RAILTRACE_H */
