# phaseprof - 3D cloud phase profiles from imager patches
