# Services package for the pilot-wave laboratory
