#include <stdio.h>
#include <string.h>
#include "guidelab.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__,        \
                    __LINE__, #cond, gl_last_error());           \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    double x = 0.0;
    CHECK(gl_trust_coefficient(45.0, 40, 50, 70, 80, &x) == GL_STATUS_OK);
    CHECK(x == 0.5);
    CHECK(gl_clipped_surrogate(2.0, 1.0, 0.2, 0.28, &x) == GL_STATUS_OK);
    CHECK(x == 1.28);
    CHECK(gl_hindsight_judge(1, 1, GL_REASON_GENERIC, &x) == GL_STATUS_OK);
    CHECK(x == 0.8);
    CHECK(gl_polarity_to_reward(3, 0.1, &x) == GL_STATUS_INVALID_ARGUMENT);
    CHECK(strlen(gl_last_error()) > 0);

    double r[3] = {0.0, 1.0, 2.0}, a[3];
    CHECK(gl_group_advantages(r, 3, 1e-8, a) == GL_STATUS_OK);
    CHECK(a[0] < 0.0 && a[2] > 0.0);

    GlEnv *env = NULL;
    CHECK(gl_env_new("keydoor", &env) == GL_STATUS_OK);
    char *obs = NULL;
    CHECK(gl_env_reset(env, 5, &obs) == GL_STATUS_OK);
    CHECK(strstr(obs, "\"key\"") != NULL);
    gl_string_free(obs);

    uint32_t buf[16];
    size_t n = 0;
    GlStepResult res = {0};
    int steps = 0;
    while (!res.done) {
        CHECK(gl_env_admissible(env, buf, 16, &n) == GL_STATUS_OK);
        CHECK(gl_env_step(env, buf[0], &res, NULL) == GL_STATUS_OK);
        steps++;
    }
    CHECK(steps > 0);
    CHECK(gl_env_step(env, buf[0], &res, NULL) == GL_STATUS_ENV);
    gl_env_free(env);

    GlTrajectory *t = NULL;
    CHECK(gl_trajectory_from_json("not json", &t) == GL_STATUS_PARSE);
    CHECK(t == NULL);
    printf("ok\n");
    return 0;
}
