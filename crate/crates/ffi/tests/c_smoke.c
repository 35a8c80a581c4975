#include <math.h>
#include <stdio.h>
#include "stiffnode.h"

int main(void) {
    StiffnodeDataset *ds = NULL;
    if (stiffnode_dataset_generate("linear1d", 25, &ds) != STIFFNODE_STATUS_OK) return 10;
    if (stiffnode_dataset_len(ds) != 25 || stiffnode_dataset_dim(ds) != 1) return 11;

    StiffnodeTrainOptions opts;
    stiffnode_train_options_default(&opts);
    opts.lr = 1.0;
    opts.epochs = 500;
    opts.refine_iterations = 50;
    StiffnodeReport *rep = NULL;
    if (stiffnode_train(ds, "if-euler", "linear1d", &opts, &rep) != STIFFNODE_STATUS_OK) return 12;

    StiffnodeModel *m = NULL;
    stiffnode_report_model(rep, &m);
    unsigned int e[1] = {1};
    double c = 0.0;
    stiffnode_model_coefficient(m, 0, e, 1, &c);
    printf("coefficient %.12e\n", c);
    if (fabs(c + 10000.0) > 1e-3) return 13;

    StiffnodeDataset *bad = NULL;
    if (stiffnode_dataset_generate("nope", 5, &bad) != STIFFNODE_STATUS_UNKNOWN_NAME) return 14;
    if (stiffnode_last_error() == NULL) return 15;

    stiffnode_model_free(m);
    stiffnode_report_free(rep);
    stiffnode_dataset_free(ds);
    return 0;
}
